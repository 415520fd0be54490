"""Command-line pipelines: normalize, eval, train, sweep, analyze.

Inputs are EMB1 embedding files; outputs are CSV. Every output CSV starts
with one comment line recording the tool version and the fully resolved
configuration, and every command is deterministic given its flags and
seeds. Exit codes: 0 success, 2 usage/validation error, 3 data error,
4 numerical failure.

The environment variable ``NCLKIT_THREADS`` caps BLAS parallelism for the
process (0 or unset = automatic).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import threadpoolctl

from . import __version__
from .embeddings import read_embeddings
from .errors import (
    DegenerateMatrix,
    DimensionMismatch,
    EmptyQueue,
    FileFormatError,
    MissingGroundTruth,
    ModalityMismatch,
    NonFinite,
)
from .evaluation import (
    Direction,
    GroundTruth,
    compute_metrics,
    false_rate_profile,
    normalization_error,
    retrieval_distribution,
)
from .decomposition import (
    modality_similarity_stats,
    similarity_decomposition,
    weighted_softmax_check,
)
from .embeddings import cosine_similarity_matrix
from .queues import QueryQueue, TestTimeBiases, apply_test_biases, oracle_test_biases, test_time_biases
from .sinkhorn import (
    BiasVectors,
    MarginalPrior,
    SinkhornOptions,
    adjust_similarity,
    compute_biases,
)
from .training import (
    LossKind,
    SyntheticDatasetSpec,
    TrainConfig,
    canonical_config,
    sweep_from_state,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    """Bad flag or config values; maps to exit code 2."""


# Keys accepted in a key=value config file for `train` and `sweep`.
CONFIG_KEYS = {
    "seed": int,
    "n_train": int,
    "n_test": int,
    "latent_dim": int,
    "text_dim": int,
    "video_dim": int,
    "noise_sigma": float,
    "cluster_count": int,
    "caption_multiplicity": int,
    "shared_modal_map": bool,
    "loss": str,
    "gamma": float,
    "batch_size": int,
    "epochs": int,
    "learning_rate": float,
    "queue_capacity": int,
    "eval_ks": str,
    "sinkhorn_iters": int,
    "sinkhorn_tol": str,
    "sinkhorn_log_domain": bool,
}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


def parse_config_file(path: str) -> dict:
    """Flat key=value lines; '#' comments and blank lines allowed."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        caster = CONFIG_KEYS[key]
        try:
            values[key] = _parse_bool(raw) if caster is bool else caster(raw)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


def _parse_ks(raw: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"bad K list {raw!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"K values must be positive integers, got {raw!r}")
    return ks


def _resolve_run_settings(args) -> tuple[SyntheticDatasetSpec, TrainConfig]:
    merged: dict = {}
    if args.config:
        merged.update(parse_config_file(args.config))
    if getattr(args, "loss", None):
        merged["loss"] = args.loss
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    if "seed" not in merged:
        raise UsageError("missing config key 'seed' (set it in the config file or via --seed)")

    loss_raw = merged.get("loss", "ncl").lower()
    try:
        loss_kind = LossKind(loss_raw)
    except ValueError:
        raise UsageError(f"loss must be 'cl' or 'ncl', got {loss_raw!r}") from None

    tol_raw = str(merged.get("sinkhorn_tol", "none")).lower()
    if tol_raw in ("none", ""):
        tol = None
    else:
        try:
            tol = float(tol_raw)
        except ValueError:
            raise UsageError(f"bad value for sinkhorn_tol: {tol_raw!r}") from None

    try:
        spec = SyntheticDatasetSpec(
            seed=int(merged["seed"]),
            n_train=merged.get("n_train", 2000),
            n_test=merged.get("n_test", 500),
            latent_dim=merged.get("latent_dim", 16),
            text_dim=merged.get("text_dim", 48),
            video_dim=merged.get("video_dim", 64),
            noise_sigma=merged.get("noise_sigma", 0.1),
            cluster_count=merged.get("cluster_count", 1),
            caption_multiplicity=merged.get("caption_multiplicity", 1),
            shared_modal_map=merged.get("shared_modal_map", False),
        )
        config = TrainConfig(
            loss_kind=loss_kind,
            gamma=merged.get("gamma", 0.05),
            batch_size=merged.get("batch_size", 128),
            epochs=merged.get("epochs", 5),
            learning_rate=merged.get("learning_rate", 0.05),
            queue_capacity=merged.get("queue_capacity", 512),
            sinkhorn=SinkhornOptions(
                n_iters=merged.get("sinkhorn_iters", 4),
                tol=tol,
                log_domain=merged.get("sinkhorn_log_domain", True),
            ),
            eval_ks=_parse_ks(merged["eval_ks"]) if "eval_ks" in merged else (1, 5, 10),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return spec, config


def _comment_line(command: str, resolved: dict) -> str:
    fields = " ".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return f"# nclkit {__version__} | {command} | {fields}"


def _write_csv(path: str, body: str, command: str, resolved: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_comment_line(command, resolved) + "\n")
        fh.write(body)


def _load_embeddings(path: str, role: str):
    try:
        return read_embeddings(path)
    except FileNotFoundError:
        raise FileFormatError(f"{role} file not found: {path}") from None


def _load_ground_truth(path: str | None, n_queries: int, n_items: int) -> GroundTruth:
    if path is None:
        if n_queries != n_items:
            raise UsageError("--gt is required when query and item counts differ")
        return GroundTruth.diagonal(n_queries)
    pairs: list[list[int]] = [[] for _ in range(n_queries)]
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                parts = stripped.split(",")
                if len(parts) != 2:
                    raise FileFormatError(f"{path}:{lineno}: expected 'query,item'")
                q, j = int(parts[0]), int(parts[1])
                if not (0 <= q < n_queries):
                    raise MissingGroundTruth(f"{path}:{lineno}: query index {q} out of range")
                if not (0 <= j < n_items):
                    raise MissingGroundTruth(f"{path}:{lineno}: item index {j} out of range")
                pairs[q].append(j)
    except OSError as exc:
        raise FileFormatError(f"cannot read ground truth {path}: {exc}") from exc
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad integer in ground truth: {exc}") from exc
    return GroundTruth(tuple(tuple(sorted(set(p))) for p in pairs), n_items=n_items)


def _load_prior(prior_arg: str, n_queries: int, n_items: int) -> MarginalPrior:
    if prior_arg == "uniform":
        return MarginalPrior.uniform(n_queries, n_items)
    try:
        with open(prior_arg, encoding="utf-8") as fh:
            counts = [float(line.strip()) for line in fh if line.strip() and not line.startswith("#")]
    except OSError as exc:
        raise FileFormatError(f"cannot read counts file {prior_arg}: {exc}") from exc
    except ValueError as exc:
        raise FileFormatError(f"{prior_arg}: bad number in counts file: {exc}") from exc
    if len(counts) != n_items:
        raise DimensionMismatch(f"counts file has {len(counts)} entries for {n_items} items")
    return MarginalPrior.from_match_counts(n_queries, np.asarray(counts))


def _positive(value: float, name: str) -> float:
    if value <= 0:
        raise UsageError(f"--{name} must be positive, got {value}")
    return value


def cmd_normalize(args) -> int:
    _positive(args.gamma, "gamma")
    if args.iters < 1:
        raise UsageError(f"--iters must be >= 1, got {args.iters}")
    texts = _load_embeddings(args.text, "text")
    videos = _load_embeddings(args.video, "video")
    sims = cosine_similarity_matrix(texts, videos)
    prior = _load_prior(args.prior, sims.n_rows, sims.n_cols)
    opts = SinkhornOptions(n_iters=args.iters)
    biases = compute_biases(sims, args.gamma, prior=prior, opts=opts)
    adjusted = adjust_similarity(sims, biases)

    resolved = {
        "text": args.text,
        "video": args.video,
        "gamma": args.gamma,
        "iters": args.iters,
        "prior": args.prior,
    }
    body = ["axis,index,bias"]
    body += [f"text,{i},{float(b)!r}" for i, b in enumerate(biases.query_biases)]
    body += [f"video,{j},{float(b)!r}" for j, b in enumerate(biases.item_biases)]
    _write_csv(args.out, "\n".join(body) + "\n", "normalize", resolved)

    report_path = args.report or args.out + ".report.csv"
    rows = ["direction,pre_error,post_error"]
    for direction, item_prior in (
        (Direction.T2V, prior.col_marginals),
        (Direction.V2T, prior.row_marginals),
    ):
        pre = normalization_error(
            retrieval_distribution(sims, args.gamma, direction), item_prior=item_prior
        )
        post = normalization_error(
            retrieval_distribution(adjusted, args.gamma, direction), item_prior=item_prior
        )
        rows.append(f"{direction.value},{pre!r},{post!r}")
    _write_csv(report_path, "\n".join(rows) + "\n", "normalize", resolved)
    return EXIT_OK


def _read_bias_file(path: str, n_texts: int, n_videos: int) -> BiasVectors:
    text_biases = np.full(n_texts, np.nan)
    video_biases = np.full(n_videos, np.nan)
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#") or stripped.startswith("axis,"):
                    continue
                parts = stripped.split(",")
                if len(parts) != 3:
                    raise FileFormatError(f"{path}:{lineno}: expected 'axis,index,bias'")
                axis, idx, value = parts[0], int(parts[1]), float(parts[2])
                if axis == "text":
                    if not 0 <= idx < n_texts:
                        raise DimensionMismatch(f"{path}:{lineno}: text index {idx} out of range")
                    text_biases[idx] = value
                elif axis == "video":
                    if not 0 <= idx < n_videos:
                        raise DimensionMismatch(f"{path}:{lineno}: video index {idx} out of range")
                    video_biases[idx] = value
                else:
                    raise FileFormatError(f"{path}:{lineno}: unknown axis {axis!r}")
    except OSError as exc:
        raise FileFormatError(f"cannot read biases {path}: {exc}") from exc
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad number in biases file: {exc}") from exc
    if np.isnan(text_biases).any() or np.isnan(video_biases).any():
        raise DimensionMismatch(f"{path}: biases missing for some indices")
    # The file stores plain additive offsets; gamma is irrelevant for application.
    return BiasVectors(text_biases, video_biases, gamma=1.0)


def cmd_eval(args) -> int:
    _positive(args.gamma, "gamma")
    ks = _parse_ks(args.ks)
    texts = _load_embeddings(args.text, "text")
    videos = _load_embeddings(args.video, "video")
    sims = cosine_similarity_matrix(texts, videos)
    gt = _load_ground_truth(args.gt, sims.n_rows, sims.n_cols)
    opts = SinkhornOptions(n_iters=args.iters)

    if args.biases == "none":
        scored = sims
    elif args.biases == "file":
        if not args.biases_file:
            raise UsageError("--biases file requires --biases-file")
        biases = _read_bias_file(args.biases_file, sims.n_rows, sims.n_cols)
        scored = adjust_similarity(sims, biases)
    elif args.biases == "oracle":
        video_side = oracle_test_biases(texts, videos, args.gamma, opts)
        text_side = oracle_test_biases(videos, texts, args.gamma, opts)
        scored = apply_test_biases(sims, t2v_biases=video_side, v2t_biases=text_side)
    else:  # queue
        if not (args.text_queue and args.video_queue):
            raise UsageError("--biases queue requires --text-queue and --video-queue")
        tq = QueryQueue.load(args.text_queue)
        vq = QueryQueue.load(args.video_queue)
        video_side = test_time_biases(tq, videos, args.gamma, opts)
        text_side = test_time_biases(vq, texts, args.gamma, opts)
        for side in (video_side, text_side):
            if side.warning:
                print(f"warning: {side.warning}", file=sys.stderr)
        scored = apply_test_biases(sims, t2v_biases=video_side, v2t_biases=text_side)

    if args.direction == "t2v":
        report = compute_metrics(scored, gt, gamma=args.gamma, ks=ks)
    else:
        report = compute_metrics(scored.transposed(), gt.inverted(), gamma=args.gamma, ks=ks)
    resolved = {
        "text": args.text,
        "video": args.video,
        "gt": args.gt or "diagonal",
        "biases": args.biases,
        "ks": args.ks,
        "gamma": args.gamma,
        "iters": args.iters,
        "direction": args.direction,
    }
    _write_csv(args.out, report.to_csv(), "eval", resolved)
    return EXIT_OK


def _run_resolved_dict(spec: SyntheticDatasetSpec, config: TrainConfig) -> dict:
    return dict(
        line.split("=", 1) for line in canonical_config(spec, config).splitlines()
    )


def cmd_train(args) -> int:
    spec, config = _resolve_run_settings(args)
    os.makedirs(args.out, exist_ok=True)
    record = train(spec, config)
    resolved = _run_resolved_dict(spec, config)
    _write_csv(os.path.join(args.out, "run.csv"), record.to_csv(), "train", resolved)
    echo_path = os.path.join(args.out, "config.txt")
    with open(echo_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(canonical_config(spec, config) + "\n")
        fh.write(f"config_hash={record.config_hash}\n")
    print(
        f"trained {config.loss_kind.value} for {config.epochs} epochs "
        f"in {record.wall_clock_s:.2f}s; outputs in {args.out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec, config = _resolve_run_settings(args)
    try:
        sizes = [int(part) for part in args.sizes.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"bad --sizes list {args.sizes!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise UsageError("--sizes must be positive integers")
    record = train(spec, config)
    rows = sweep_from_state(record.state, sizes)
    resolved = _run_resolved_dict(spec, config)
    resolved["sizes"] = args.sizes
    body = "k,t2v_r1,v2t_r1\n" + "".join(f"{k},{a!r},{b!r}\n" for k, a, b in rows)
    _write_csv(args.out, body, "sweep", resolved)
    return EXIT_OK


def cmd_analyze(args) -> int:
    _positive(args.gamma, "gamma")
    if args.bins < 2:
        raise UsageError(f"--bins must be >= 2, got {args.bins}")
    texts = _load_embeddings(args.text, "text")
    videos = _load_embeddings(args.video, "video")
    sims = cosine_similarity_matrix(texts, videos)
    terms = similarity_decomposition(texts, videos)
    identity_residual = float(np.abs(terms.total() - sims.values).max())
    softmax_dev = weighted_softmax_check(texts, videos, args.gamma)
    stats = modality_similarity_stats(texts, videos)
    resolved = {
        "text": args.text,
        "video": args.video,
        "gamma": args.gamma,
        "bins": args.bins,
        "gt": args.gt or "diagonal",
    }
    rows = ["metric,value"]
    for name in ("text_text", "video_video", "text_video"):
        rows.append(f"{name},{stats[name]!r}")
    rows.append(f"mean_abs_query_bias_term,{float(np.abs(terms.text_offset_term).mean())!r}")
    rows.append(f"mean_abs_item_bias_term,{float(np.abs(terms.video_offset_term).mean())!r}")
    rows.append(f"decomposition_residual,{identity_residual!r}")
    rows.append(f"weighted_softmax_deviation,{softmax_dev!r}")
    _write_csv(args.out + "_stats.csv", "\n".join(rows) + "\n", "analyze", resolved)

    gt = _load_ground_truth(args.gt, sims.n_rows, sims.n_cols)
    dist = retrieval_distribution(sims, args.gamma, Direction.T2V)
    profile = false_rate_profile(dist, gt, bins=args.bins)
    _write_csv(args.out + "_false_rates.csv", profile.to_csv(), "analyze", resolved)

    if args.export_sims:
        lines = [",".join(repr(float(v)) for v in row) for row in sims.values]
        _write_csv(args.export_sims, "\n".join(lines) + "\n", "analyze", resolved)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nclkit",
        description="Normalize, evaluate, and train embedding-based cross-modal retrieval.",
    )
    parser.add_argument("--version", action="version", version=f"nclkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="compute instance biases for a pair of embedding files")
    p.add_argument("--text", required=True, help="EMB1 file of query-side embeddings")
    p.add_argument("--video", required=True, help="EMB1 file of item-side embeddings")
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=4, help="fixed-point iterations")
    p.add_argument("--prior", default="uniform", help="'uniform' or a per-item counts file")
    p.add_argument("--out", required=True, help="biases CSV path")
    p.add_argument("--report", default=None, help="report CSV path (default: <out>.report.csv)")
    p.set_defaults(handler=cmd_normalize)

    p = sub.add_parser("eval", help="retrieval metrics with optional bias adjustment")
    p.add_argument("--text", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--gt", default=None, help="CSV of query,item pairs (default: diagonal)")
    p.add_argument("--biases", choices=["none", "file", "oracle", "queue"], default="none")
    p.add_argument("--biases-file", default=None)
    p.add_argument("--text-queue", default=None, help="queue checkpoint for video-side biases")
    p.add_argument("--video-queue", default=None, help="queue checkpoint for text-side biases")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=4)
    p.add_argument("--direction", choices=["t2v", "v2t"], default="t2v")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("train", help="train the synthetic two-encoder model")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--loss", choices=["cl", "ncl"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sweep", help="train once, then sweep the queue size")
    p.add_argument("--config", default=None)
    p.add_argument("--loss", choices=["cl", "ncl"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sizes", required=True, help="comma-separated queue sizes")
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("analyze", help="embedding-geometry statistics and false-rate profile")
    p.add_argument("--text", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--gt", default=None)
    p.add_argument("--export-sims", default=None, help="also dump the raw similarity matrix CSV")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(handler=cmd_analyze)
    return parser


def _thread_limit() -> int | None:
    raw = os.environ.get("NCLKIT_THREADS")
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"NCLKIT_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise UsageError(f"NCLKIT_THREADS must be >= 0, got {value}")
    return value or None  # 0 = automatic


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limit = _thread_limit()
        if limit is not None:
            with threadpoolctl.threadpool_limits(limits=limit):
                return args.handler(args)
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        FileFormatError,
        MissingGroundTruth,
        DimensionMismatch,
        ModalityMismatch,
        EmptyQueue,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFinite, DegenerateMatrix) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
