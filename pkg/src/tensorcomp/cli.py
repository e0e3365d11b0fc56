"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 file-format error, 3 numerical failure.
"""
import argparse
import sys

from . import budget as bd
from .analyze import pca_pair, pca_single
from .decomp import (
    DEFAULT_MAX_ITERS, DEFAULT_TOL, TTFactors, TuckerFactors, decompose_svd, decompose_tt,
    decompose_tucker, read_tkf, reconstruct, reconstruction_error, tucker_from_tt, write_tkf,
)
from .distill import DistillConfig, DivergenceError, distill_demo, write_curve_csv
from .linalg import SvdConvergenceError
from .stack import FormatError, TransformerConfig, WeightStack, random_stack, read_wts, write_wts
from .transformer import benchmark_forward

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(x) -> str:
    return f"{x:.17g}"


def _open_text_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


def cmd_gen(a):
    ws = random_stack(a.L, a.D, a.seed, n_heads=a.n_heads)
    write_wts(a.out, ws)
    print(f"wrote {a.out}: L={a.L} D={a.D} slices={ws.n_slices}")


def cmd_analyze(a):
    ws = read_wts(a.input)
    rep = pca_pair(ws, a.pair, seed=a.seed) if a.pair else pca_single(ws)
    fh = _open_text_out(a.out)
    try:
        rep.write_csv(fh)
    finally:
        if fh is not sys.stdout:
            fh.close()
    print(f"fraction above 0.9 at D/2: {_fmt(rep.summary())}", file=sys.stderr)


def cmd_decompose(a):
    ws = read_wts(a.input)
    method = a.method
    if method == "svd":
        f = decompose_svd(ws, a.rank_d, "alpha", threads=a.threads)
    elif method == "svd-balanced":
        f = decompose_svd(ws, a.rank_d, "beta", threads=a.threads)
    elif method == "tt":
        f = decompose_tt(ws, a.rank_d)
    else:
        if a.rank_l is None:
            raise UsageError("decompose: --rank-l is required for --method tucker")
        f = decompose_tucker(ws, a.rank_l, a.rank_d, tol=a.tol, max_iters=a.max_iters)
    total, per_slice = reconstruction_error(ws, f)
    write_tkf(a.out, f)
    print(f"method {method}")
    print(f"relative_error {_fmt(total)}")
    print(f"max_slice_error {_fmt(per_slice.max())}")
    if isinstance(f, TuckerFactors) and f.fit is not None:
        print(f"iterations {f.fit.iterations}")
        print(f"converged {str(f.fit.converged).lower()}")


def cmd_reconstruct(a):
    f = read_tkf(a.input)
    n = f.n_slices
    cfg = TransformerConfig(L=n // 12, D=f.D)
    write_wts(a.out, WeightStack(cfg, reconstruct(f)))
    print(f"wrote {a.out}")


def cmd_error(a):
    ws = read_wts(a.weights)
    f = read_tkf(a.factors)
    if f.n_slices != ws.n_slices or f.D != ws.config.D:
        raise FormatError(f"{a.factors}: factors do not match the shape of {a.weights}")
    total, _ = reconstruction_error(ws, f)
    print(_fmt(total))


def _query(a, need_bn=False):
    if a.method is None:
        raise UsageError("--method is required")
    if a.L is None or a.D is None:
        raise UsageError("--L and --D are required")
    if need_bn and (a.b is None or a.n is None):
        raise UsageError("--b and --n are required")
    try:
        return bd.BudgetQuery(a.method, a.L, a.D, d=a.rank_d, l=a.rank_l, V=getattr(a, "V", None),
                              n_ctx=getattr(a, "n_ctx", None), b=a.b, n=a.n,
                              overhead=getattr(a, "overhead", False))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_budget(a):
    out = sys.stdout
    if a.table4:
        w = ["name", "core_params", "paper_params", "offset", "flops", "paper_flops", "flops_rel_err"]
        print(",".join(w), file=out)
        for r in bd.table4_rows():
            print(",".join(str(r[k]) if isinstance(r[k], (int, str)) else _fmt(r[k]) for k in w), file=out)
        return
    if a.table7:
        reports = bd.compression_table(bd.table7_rows())
        print("name,total,paper_total,rel_err,ratio,paper_ratio", file=out)
        for rep, row in zip(reports, bd.TABLE7):
            paper_total, paper_ratio = row[6], row[7]
            print(f"{rep.name},{rep.total},{_fmt(paper_total)},{_fmt(rep.total / paper_total - 1)},"
                  f"{_fmt(float(rep.ratio))},{_fmt(paper_ratio)}", file=out)
        return
    q = _query(a)
    bd.write_reports_csv(out, [bd.report(q)])


def cmd_flops(a):
    print(bd.flops_forward(_query(a, need_bn=True)))


def cmd_distill_demo(a):
    cfg = DistillConfig(seed=a.seed, steps_gd=a.steps_gd, steps_td=a.steps_td, lr=a.lr,
                        batch_size=a.b, seq_len=a.n, temperature=a.temperature)
    curve, *_ = distill_demo(L=a.L, D=a.D, n_heads=a.n_heads, d=a.rank_d, l=a.rank_l, cfg=cfg)
    fh = _open_text_out(a.out)
    try:
        write_curve_csv(fh, curve)
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_bench(a):
    r = benchmark_forward(D=a.D, d=a.rank_d, n=a.n, reps=a.reps, L=a.L, b=a.b,
                          l=a.rank_l, n_heads=a.n_heads, seed=a.seed)
    print("path,median_s,iqr_s")
    for key in ("dense", "factored"):
        print(f"{key},{_fmt(r[key]['median'])},{_fmt(r[key]['iqr'])}")


def cmd_distances(a):
    from .analyze import factor_distances

    f = read_tkf(a.input)
    if isinstance(f, TTFactors):
        f = tucker_from_tt(f)
    if not isinstance(f, TuckerFactors):
        raise UsageError("distances: needs TT or Tucker factors, got per-slice SVD factors")
    dm = factor_distances(f)
    fh = _open_text_out(a.out)
    try:
        dm.write_csv(fh)
    finally:
        if fh is not sys.stdout:
            fh.close()


def build_parser():
    p = _Parser(prog="tensorcomp", description="Tensor-decomposition compression of Transformer weight stacks")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen", help="seeded random weight stack -> WTS")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--D", type=int, required=True)
    s.add_argument("--n-heads", type=int, default=1)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("analyze", help="PCA captured-variance curves -> CSV")
    s.add_argument("input")
    s.add_argument("--pair", choices=["rows", "cols"])
    s.add_argument("--seed", type=int, default=0, help="pair sampling seed")
    s.add_argument("-o", "--out")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("decompose", help="WTS -> TKF factors")
    s.add_argument("input")
    s.add_argument("--method", choices=["svd", "svd-balanced", "tt", "tucker"], required=True)
    s.add_argument("--rank-d", type=int, required=True)
    s.add_argument("--rank-l", type=int)
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("reconstruct", help="TKF -> WTS")
    s.add_argument("input")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("error", help="relative reconstruction error of TKF against WTS")
    s.add_argument("weights")
    s.add_argument("factors")
    s.set_defaults(fn=cmd_error)

    def shape_flags(s):
        s.add_argument("--method")
        s.add_argument("--L", type=int)
        s.add_argument("--D", type=int)
        s.add_argument("--rank-d", type=int)
        s.add_argument("--rank-l", type=int)
        s.add_argument("--b", type=int)
        s.add_argument("--n", type=int)

    s = sub.add_parser("budget", help="parameter accounting -> CSV")
    shape_flags(s)
    s.add_argument("--V", type=int, help="vocabulary size")
    s.add_argument("--n-ctx", type=int, help="position (+ token type) rows")
    s.add_argument("--overhead", action="store_true", help="include biases and LayerNorms")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--table4", action="store_true")
    g.add_argument("--table7", action="store_true")
    s.set_defaults(fn=cmd_budget)

    s = sub.add_parser("flops", help="forward FLOPs as an integer")
    shape_flags(s)
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("distill-demo", help="seeded GD+TD toy run -> loss-curve CSV")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--L", type=int, default=2)
    s.add_argument("--D", type=int, default=16)
    s.add_argument("--n-heads", type=int, default=2)
    s.add_argument("--rank-d", type=int, default=4)
    s.add_argument("--rank-l", type=int, default=8)
    s.add_argument("--steps-gd", type=int, default=500)
    s.add_argument("--steps-td", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--b", type=int, default=8)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("-o", "--out")
    s.set_defaults(fn=cmd_distill_demo)

    s = sub.add_parser("bench", help="median wall-clock of dense vs factored forward")
    s.add_argument("--D", type=int, default=512)
    s.add_argument("--rank-d", type=int, default=64)
    s.add_argument("--rank-l", type=int)
    s.add_argument("--n", type=int, default=128)
    s.add_argument("--b", type=int, default=1)
    s.add_argument("--L", type=int, default=1)
    s.add_argument("--n-heads", type=int, default=8)
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("distances", help="factor-vector cosine distances -> CSV")
    s.add_argument("input")
    s.add_argument("-o", "--out")
    s.set_defaults(fn=cmd_distances)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SvdConvergenceError, DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
