"""Command-line driver: generate / fit / predict / eval / sweep.

All data flows through the text formats in :mod:`wsibp.dataio`; progress goes
to stderr. Every command honors ``--seed`` and records it in its outputs, and
repeated invocations with identical arguments (including any ``--threads``
value) produce byte-identical files. Exit codes: 0 success, 2 validation
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .decode import score, threshold_sweep
from .inference import (
    MODE_FREE_ANNOTATION,
    MODE_WITH_LABELS,
    VARIANTS,
    FitOptions,
    InferenceEngine,
    predict,
)
from .sampler import sample_dataset
from .types import Dataset, HyperParams, NumericalError, ValidationError


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _fit_options(args, variant: Optional[str] = None) -> FitOptions:
    return FitOptions(
        inner_max_iters=args.inner_iters,
        outer_max_iters=args.outer_iters,
        inner_rel_tol=args.inner_tol,
        outer_rel_tol=args.outer_tol,
        seed=args.seed,
        variant=variant if variant is not None else args.variant,
        threads=args.threads,
    )


def _hyperparams(args, k_max: Optional[int] = None, alpha: Optional[float] = None, c: Optional[float] = None) -> HyperParams:
    return HyperParams(
        alpha=alpha if alpha is not None else args.alpha,
        penalty_c=c if c is not None else args.c,
        k_max=k_max if k_max is not None else args.kmax,
        sigma_n2=args.sigma_n2,
        sigma_a2=args.sigma_a2,
        estimate_variances=args.estimate_variances,
    )


def cmd_generate(args) -> int:
    cfg = dataio.load_gen_config(args.config, seed_override=args.seed)
    _log(f"generate: {cfg.num_videos} bags, seed {cfg.seed}")
    dataset = sample_dataset(cfg)
    dataio.save_dataset(dataset, args.out)
    _log(f"generate: wrote {args.out}")
    return 0


def cmd_fit(args) -> int:
    dataset = dataio.load_dataset(args.dataset)
    opts = _fit_options(args)
    hp = _hyperparams(args)
    _log(f"fit: variant {opts.variant}, {dataset.num_videos} bags, k_max {hp.k_max}")
    engine = InferenceEngine(dataset, hp, opts)
    state, report = engine.fit()
    dataio.save_model(engine.to_model(state), args.out_model)
    if args.out_report:
        dataio.save_report(report, args.out_report)
    _log(
        f"fit: {report.inner_iterations} sweeps, objective {report.final_objective:.6g}, "
        f"wrote {args.out_model}"
    )
    return 0


def cmd_predict(args) -> int:
    model = dataio.load_model(args.model)
    dataset = dataio.load_dataset(args.dataset)
    mode = MODE_FREE_ANNOTATION if args.free_annotation else MODE_WITH_LABELS
    opts = FitOptions(
        inner_max_iters=args.inner_iters,
        inner_rel_tol=args.inner_tol,
        seed=args.seed,
        variant=model.variant,
        threads=args.threads,
    )
    _log(f"predict: {dataset.num_videos} bags, mode {mode}")
    state = predict(model, dataset, opts, mode)
    dataio.save_predictions(state, dataset, mode, args.out, seed=args.seed)
    _log(f"predict: wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    state, ids, header = dataio.load_predictions(args.predictions)
    dataset = dataio.load_dataset(args.dataset)
    if [bag.id for bag in dataset.videos] != ids:
        raise ValidationError("predictions and dataset list different bags")
    if header["space"] != dataset.space:
        raise ValidationError("predictions and dataset disagree on the concept space")
    metrics = score(state, dataset, theta_bg=args.theta_bg)
    sweep = threshold_sweep(state, dataset)
    dataio.save_metrics(metrics, sweep, args.out, seed=args.seed, theta_bg=args.theta_bg)
    _log(
        f"eval: subject {metrics.subject_accuracy:.3f}, action {metrics.action_accuracy:.3f}, "
        f"pairwise {metrics.pairwise_accuracy:.3f}; wrote {args.out}"
    )
    return 0


def parse_grid(spec: str) -> dict[str, list[float]]:
    """Parse ``name=start:step:stop`` (inclusive) lists, comma-separated.

    A bare ``name=value`` gives a single point. An empty spec is an error.
    """
    grid: dict[str, list[float]] = {}
    spec = spec.strip()
    if not spec:
        raise ValidationError("empty grid specification")
    for part in spec.split(","):
        part = part.strip()
        if not part or "=" not in part:
            raise ValidationError(f"bad grid entry {part!r}; expected name=start:step:stop")
        name, _, rhs = part.partition("=")
        name = name.strip().lower()
        if name not in ("kmax", "alpha", "c"):
            raise ValidationError(f"unknown grid parameter {name!r}; expected kmax, alpha or c")
        pieces = rhs.split(":")
        try:
            if len(pieces) == 1:
                values = [float(pieces[0])]
            elif len(pieces) == 3:
                start, step, stop = (float(p) for p in pieces)
                if step <= 0:
                    raise ValidationError(f"grid step must be > 0 in {part!r}")
                count = int(np.floor((stop - start) / step + 1e-9)) + 1
                if count < 1:
                    raise ValidationError(f"empty grid range {part!r}")
                values = [start + step * n for n in range(count)]
            else:
                raise ValidationError(f"bad grid entry {part!r}; expected name=start:step:stop")
        except ValueError as e:
            raise ValidationError(f"bad number in grid entry {part!r}") from e
        grid[name] = values
    return grid


def _split_train_val(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    m = dataset.num_videos
    n_val = max(1, int(round(fraction * m)))
    if n_val >= m:
        raise ValidationError("validation fraction leaves no training bags")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(m)
    val_idx = set(order[:n_val].tolist())
    train = Dataset(dataset.space, [dataset.videos[i] for i in range(m) if i not in val_idx])
    val = Dataset(dataset.space, [dataset.videos[i] for i in range(m) if i in val_idx])
    return train, val


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    dataset = dataio.load_dataset(args.dataset)
    if not dataset.has_ground_truth():
        raise ValidationError("sweep needs ground truth on the dataset to rank by accuracy")
    train, val = _split_train_val(dataset, args.val_fraction, args.seed)
    kmaxes = [int(v) for v in grid.get("kmax", [args.kmax])]
    alphas = grid.get("alpha", [args.alpha])
    cs = grid.get("c", [args.c])
    rows = []
    total = len(kmaxes) * len(alphas) * len(cs)
    n = 0
    for k_max in kmaxes:
        for alpha in alphas:
            for c in cs:
                n += 1
                _log(f"sweep: [{n}/{total}] kmax={k_max} alpha={alpha:g} c={c:g}")
                hp = _hyperparams(args, k_max=k_max, alpha=alpha, c=c)
                opts = _fit_options(args)
                engine = InferenceEngine(train, hp, opts)
                state, _ = engine.fit()
                val_state = predict(engine.to_model(state), val, opts, MODE_WITH_LABELS)
                m = score(val_state, val, theta_bg=args.theta_bg)
                rows.append(
                    (
                        m.pairwise_accuracy,
                        m.subject_accuracy,
                        m.action_accuracy,
                        k_max,
                        alpha,
                        c,
                    )
                )
    rows.sort(key=lambda r: (-r[0], -r[1] - r[2], r[3], r[4], r[5]))
    lines = ["rank\tkmax\talpha\tc\tpairwise\tsubject\taction"]
    for rank, (pw, sa, aa, k_max, alpha, c) in enumerate(rows, start=1):
        lines.append(f"{rank}\t{k_max}\t{alpha:.6g}\t{c:.6g}\t{pw:.6f}\t{sa:.6f}\t{aa:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _log(f"sweep: wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsibp",
        description="Weakly supervised concept classification and localization in track bags.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0, help="seed recorded in outputs (default 0)")
        p.add_argument("--threads", type=int, default=1, help="per-bag parallelism (default 1)")

    def add_fit_knobs(p):
        p.add_argument("--variant", choices=VARIANTS, default="wsc-siibp")
        p.add_argument("--alpha", type=float, default=100.0, help="sparsity prior (default 100)")
        p.add_argument("--kmax", type=int, default=30, help="factor truncation (default 30)")
        p.add_argument("--c", type=float, default=0.5, help="constraint penalty weight (default 0.5)")
        p.add_argument("--sigma-n2", dest="sigma_n2", type=float, default=1.0)
        p.add_argument("--sigma-a2", dest="sigma_a2", type=float, default=1.0)
        p.add_argument(
            "--no-estimate-variances",
            dest="estimate_variances",
            action="store_false",
            help="hold the noise/appearance variances fixed",
        )
        p.add_argument("--inner-iters", type=int, default=100)
        p.add_argument("--outer-iters", type=int, default=10)
        p.add_argument("--inner-tol", type=float, default=1e-3)
        p.add_argument("--outer-tol", type=float, default=1e-4)

    p = sub.add_parser("generate", help="sample a synthetic dataset from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a model variant on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-report", default=None)
    add_fit_knobs(p)
    add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="test-time inference on held-out bags")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--free-annotation", action="store_true")
    p.add_argument("--inner-iters", type=int, default=100)
    p.add_argument("--inner-tol", type=float, default=1e-3)
    add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against planted ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-bg", dest="theta_bg", type=float, default=0.5)
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid search ranked by validation accuracy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", required=True, help='e.g. "kmax=6:2:10,alpha=20:10:40,c=0:0.5:5"')
    p.add_argument("--out", default=None, help="output table path (default: stdout)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.25)
    p.add_argument("--theta-bg", dest="theta_bg", type=float, default=0.5)
    add_fit_knobs(p)
    add_common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as e:
        _log(f"error: {e}")
        return 2
    except NumericalError as e:
        _log(f"numerical abort: {e}")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
