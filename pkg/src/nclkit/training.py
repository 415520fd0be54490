"""Desk-scale trainer comparing plain and normalized contrastive objectives.

Synthetic paired data comes from a shared latent variable pushed through
two fixed random linear maps plus Gaussian noise. Two linear encoders (one
per modality) followed by unit normalization are trained with plain
minibatch gradient descent; query queues capture batch embeddings so test
evaluation can compare raw, queue-normalized, and oracle-normalized
retrieval.

All randomness derives from the dataset seed through a fixed splitting
scheme: ``SeedSequence(seed).spawn(8)`` yields streams for (0) the modal
maps, (1) cluster centers, (2) train latents, (3) train noise, (4) test
latents, (5) test noise, (6) encoder init, (7) batch shuffling. Identical
(spec, config) therefore reproduce identical runs on one platform.
"""

from __future__ import annotations

import enum
import hashlib
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .embeddings import EmbeddingSet, Modality, cosine_similarity_matrix
from .errors import NonFinite
from .evaluation import GroundTruth, MetricsReport, compute_metrics
from .losses import contrastive_loss, ncl_loss
from .queues import QueryQueue, TestTimeBiases, apply_test_biases, oracle_test_biases, test_time_biases
from .sinkhorn import MarginalPrior, SinkhornOptions

EMBED_NORM_FLOOR = 1e-12


class LossKind(enum.Enum):
    CL = "cl"
    NCL = "ncl"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Shape and randomness of a synthetic paired two-modality dataset.

    ``caption_multiplicity`` > 1 attaches several text rows (independent
    noise, shared latent) to each video, mimicking many-captions-per-video
    test sets. ``shared_modal_map`` forces both modalities through the same
    linear map (requires equal feature dims), giving perfectly alignable
    pairs in the noiseless limit.
    """

    seed: int
    n_train: int = 2000
    n_test: int = 500
    latent_dim: int = 16
    text_dim: int = 48
    video_dim: int = 64
    noise_sigma: float = 0.1
    cluster_count: int = 1
    caption_multiplicity: int = 1
    shared_modal_map: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.text_dim < self.latent_dim or self.video_dim < self.latent_dim:
            raise ValueError("feature dims must be >= latent_dim")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.cluster_count < 1 or self.caption_multiplicity < 1:
            raise ValueError("cluster_count and caption_multiplicity must be >= 1")
        if self.shared_modal_map and self.text_dim != self.video_dim:
            raise ValueError("shared_modal_map requires text_dim == video_dim")


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: LossKind = LossKind.NCL
    gamma: float = 0.05
    batch_size: int = 128
    epochs: int = 5
    learning_rate: float = 0.05
    queue_capacity: int = 512
    sinkhorn: SinkhornOptions = SinkhornOptions()
    eval_ks: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.gamma <= 0 or self.learning_rate <= 0:
            raise ValueError("gamma and learning_rate must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        object.__setattr__(self, "eval_ks", tuple(int(k) for k in self.eval_ks))


@dataclass(frozen=True)
class SyntheticDataset:
    """Raw (pre-encoder) feature matrices plus directional ground truth."""

    spec: SyntheticDatasetSpec
    train_texts: np.ndarray
    train_videos: np.ndarray
    test_texts: np.ndarray
    test_videos: np.ndarray
    train_gt: GroundTruth  # caption -> video
    test_gt: GroundTruth


@dataclass
class TrainState:
    """Mutable training artifacts; kept on the RunRecord for reuse (not serialized)."""

    w_text: np.ndarray
    w_video: np.ndarray
    text_queue: QueryQueue
    video_queue: QueryQueue
    dataset: SyntheticDataset
    config: TrainConfig


@dataclass(frozen=True)
class MetricEntry:
    split: str
    mode: str
    direction: str
    report: MetricsReport


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float | None
    entries: tuple[MetricEntry, ...]


@dataclass
class RunRecord:
    """Per-epoch metric history plus provenance of the final normalization."""

    epochs: list[EpochRecord]
    wall_clock_s: float
    config_hash: str
    final_queue_provenance: dict[str, TestTimeBiases] | None
    state: TrainState

    def to_csv(self) -> str:
        """Rows of (epoch, split, mode, metric, value); see module docs for modes."""
        buf = io.StringIO()
        buf.write("epoch,split,mode,metric,value\n")
        for rec in self.epochs:
            if rec.mean_loss is not None:
                buf.write(f"{rec.epoch},train,none,loss,{rec.mean_loss!r}\n")
            for entry in rec.entries:
                rep = entry.report
                prefix = entry.direction
                rows = [(f"{prefix}_r{k}", v) for k, v in rep.recall_at.items()]
                rows += [(f"{prefix}_mdr", rep.median_rank), (f"{prefix}_mnr", rep.mean_rank)]
                if entry.direction == "t2v":
                    rows += [
                        ("t2v_norm_error", rep.t2v_norm_error),
                        ("v2t_norm_error", rep.v2t_norm_error),
                    ]
                for name, value in rows:
                    buf.write(f"{rec.epoch},{entry.split},{entry.mode},{name},{value!r}\n")
        return buf.getvalue()

    def metric(self, epoch: int, split: str, mode: str, direction: str) -> MetricsReport:
        for rec in self.epochs:
            if rec.epoch == epoch:
                for entry in rec.entries:
                    if (entry.split, entry.mode, entry.direction) == (split, mode, direction):
                        return entry.report
        raise KeyError(f"no metrics for epoch={epoch} split={split} mode={mode} dir={direction}")


def config_hash(spec: SyntheticDatasetSpec, config: TrainConfig) -> str:
    text = canonical_config(spec, config)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def canonical_config(spec: SyntheticDatasetSpec, config: TrainConfig) -> str:
    parts = []
    for obj in (spec, config):
        for name in sorted(obj.__dataclass_fields__):
            value = getattr(obj, name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, SinkhornOptions):
                value = (
                    f"n_iters={value.n_iters};tol={value.tol};"
                    f"log_domain={value.log_domain};cap={value.max_iters_cap}"
                )
            parts.append(f"{name}={value}")
    return "\n".join(parts)


def generate_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Deterministic paired features: ``A z + sigma * noise`` per modality."""
    streams = np.random.SeedSequence(spec.seed).spawn(8)
    rng_maps = np.random.default_rng(streams[0])
    rng_clusters = np.random.default_rng(streams[1])

    a_text = rng_maps.normal(size=(spec.text_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    if spec.shared_modal_map:
        a_video = a_text
    else:
        a_video = rng_maps.normal(size=(spec.video_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)

    if spec.cluster_count > 1:
        centers = 2.0 * rng_clusters.normal(size=(spec.cluster_count, spec.latent_dim))
        within = 0.5
    else:
        centers = np.zeros((1, spec.latent_dim))
        within = 1.0

    def make_split(n: int, z_stream, noise_stream):
        rng_z = np.random.default_rng(z_stream)
        rng_noise = np.random.default_rng(noise_stream)
        assign = rng_z.integers(spec.cluster_count, size=n)
        latents = centers[assign] + within * rng_z.normal(size=(n, spec.latent_dim))
        videos = latents @ a_video.T
        videos = videos + spec.noise_sigma * rng_noise.normal(size=videos.shape)
        mult = spec.caption_multiplicity
        rep = np.repeat(latents, mult, axis=0)
        texts = rep @ a_text.T + spec.noise_sigma * rng_noise.normal(size=(n * mult, spec.text_dim))
        gt = GroundTruth(tuple((q // mult,) for q in range(n * mult)), n_items=n)
        return texts, videos, gt

    train_texts, train_videos, train_gt = make_split(spec.n_train, streams[2], streams[3])
    test_texts, test_videos, test_gt = make_split(spec.n_test, streams[4], streams[5])
    return SyntheticDataset(
        spec=spec,
        train_texts=train_texts,
        train_videos=train_videos,
        test_texts=test_texts,
        test_videos=test_videos,
        train_gt=train_gt,
        test_gt=test_gt,
    )


def _encode(weight: np.ndarray, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear map followed by row normalization; returns (unit rows, raw norms)."""
    raw = features @ weight.T
    norms = np.linalg.norm(raw, axis=1)
    if (norms < EMBED_NORM_FLOOR).any():
        raise NonFinite("encoder collapsed a row to zero norm")
    return raw / norms[:, None], norms


def _weight_grad(
    features: np.ndarray, unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray
) -> np.ndarray:
    """Backprop through row normalization: project out the radial component."""
    radial = np.sum(d_unit * unit, axis=1, keepdims=True)
    d_raw = (d_unit - unit * radial) / norms[:, None]
    return d_raw.T @ features


def _embed_set(weight: np.ndarray, features: np.ndarray, modality: Modality) -> EmbeddingSet:
    unit, _ = _encode(weight, features)
    return EmbeddingSet(modality=modality, vectors=unit)


def _split_prior(n_texts: int, n_videos: int, gt_t2v: GroundTruth) -> MarginalPrior:
    """Uniform query weights; item weights follow match counts when they differ."""
    if n_texts == n_videos:
        return MarginalPrior.uniform(n_texts, n_videos)
    counts = np.zeros(n_videos)
    for items in gt_t2v.pairs:
        for j in items:
            counts[j] += 1.0
    return MarginalPrior(np.full(n_texts, 1.0 / n_texts), counts / counts.sum())


def _metrics_both_directions(
    sims, gt_t2v: GroundTruth, gamma: float, ks, prior: MarginalPrior
) -> tuple[MetricsReport, MetricsReport]:
    rev_prior = MarginalPrior(prior.col_marginals, prior.row_marginals)
    t2v = compute_metrics(sims, gt_t2v, gamma=gamma, ks=ks, prior=prior)
    v2t = compute_metrics(sims.transposed(), gt_t2v.inverted(), gamma=gamma, ks=ks, prior=rev_prior)
    return t2v, v2t


def _evaluate_split(
    split: str,
    texts: EmbeddingSet,
    videos: EmbeddingSet,
    gt_t2v: GroundTruth,
    config: TrainConfig,
    text_queue: QueryQueue | None,
    video_queue: QueryQueue | None,
    with_queue_mode: bool,
) -> tuple[list[MetricEntry], dict[str, TestTimeBiases] | None]:
    prior = _split_prior(texts.n, videos.n, gt_t2v)
    sims = cosine_similarity_matrix(texts, videos)
    entries: list[MetricEntry] = []
    queue_prov: dict[str, TestTimeBiases] | None = None

    t2v, v2t = _metrics_both_directions(sims, gt_t2v, config.gamma, config.eval_ks, prior)
    entries.append(MetricEntry(split, "none", "t2v", t2v))
    entries.append(MetricEntry(split, "none", "v2t", v2t))

    queues_ready = (
        with_queue_mode
        and text_queue is not None
        and video_queue is not None
        and len(text_queue) > 0
        and len(video_queue) > 0
    )
    if queues_ready:
        video_side = test_time_biases(text_queue, videos, config.gamma, config.sinkhorn)
        text_side = test_time_biases(video_queue, texts, config.gamma, config.sinkhorn)
        adjusted = apply_test_biases(sims, t2v_biases=video_side, v2t_biases=text_side)
        t2v, v2t = _metrics_both_directions(adjusted, gt_t2v, config.gamma, config.eval_ks, prior)
        entries.append(MetricEntry(split, "queue", "t2v", t2v))
        entries.append(MetricEntry(split, "queue", "v2t", v2t))
        queue_prov = {"t2v": video_side, "v2t": text_side}

    video_side = oracle_test_biases(texts, videos, config.gamma, config.sinkhorn)
    text_side = oracle_test_biases(videos, texts, config.gamma, config.sinkhorn)
    adjusted = apply_test_biases(sims, t2v_biases=video_side, v2t_biases=text_side)
    t2v, v2t = _metrics_both_directions(adjusted, gt_t2v, config.gamma, config.eval_ks, prior)
    entries.append(MetricEntry(split, "oracle", "t2v", t2v))
    entries.append(MetricEntry(split, "oracle", "v2t", v2t))
    return entries, queue_prov


def _evaluate_epoch(epoch: int, mean_loss, state: TrainState):
    ds = state.dataset
    train_texts = _embed_set(state.w_text, ds.train_texts, Modality.TEXT)
    train_videos = _embed_set(state.w_video, ds.train_videos, Modality.VIDEO)
    test_texts = _embed_set(state.w_text, ds.test_texts, Modality.TEXT)
    test_videos = _embed_set(state.w_video, ds.test_videos, Modality.VIDEO)
    entries: list[MetricEntry] = []
    train_entries, _ = _evaluate_split(
        "train", train_texts, train_videos, ds.train_gt, state.config, None, None, False
    )
    test_entries, queue_prov = _evaluate_split(
        "test",
        test_texts,
        test_videos,
        ds.test_gt,
        state.config,
        state.text_queue,
        state.video_queue,
        True,
    )
    entries.extend(train_entries)
    entries.extend(test_entries)
    return EpochRecord(epoch=epoch, mean_loss=mean_loss, entries=tuple(entries)), queue_prov


def train(spec: SyntheticDatasetSpec, config: TrainConfig) -> RunRecord:
    """Minibatch gradient descent on the configured loss; evaluates every epoch.

    Epoch 0 records the untrained model. Query queues are filled with each
    batch's embeddings regardless of the loss so queue-mode evaluation stays
    comparable between objectives; test-split evaluation covers raw,
    queue-normalized (once queues are nonempty), and oracle-normalized
    retrieval, the train split raw and oracle only.
    """
    t_start = time.perf_counter()
    dataset = generate_dataset(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(8)
    rng_init = np.random.default_rng(streams[6])
    rng_shuffle = np.random.default_rng(streams[7])

    embed_dim = spec.latent_dim
    w_text = rng_init.normal(size=(embed_dim, spec.text_dim)) / np.sqrt(spec.text_dim)
    w_video = rng_init.normal(size=(embed_dim, spec.video_dim)) / np.sqrt(spec.video_dim)
    state = TrainState(
        w_text=w_text,
        w_video=w_video,
        text_queue=QueryQueue(Modality.TEXT, embed_dim, config.queue_capacity),
        video_queue=QueryQueue(Modality.VIDEO, embed_dim, config.queue_capacity),
        dataset=dataset,
        config=config,
    )

    first, queue_prov = _evaluate_epoch(0, None, state)
    records = [first]
    n_captions = dataset.train_texts.shape[0]
    video_of = np.array([items[0] for items in dataset.train_gt.pairs])

    for epoch in range(1, config.epochs + 1):
        perm = rng_shuffle.permutation(n_captions)
        step_losses = []
        for start in range(0, n_captions - config.batch_size + 1, config.batch_size):
            caption_idx = perm[start : start + config.batch_size]
            x_text = dataset.train_texts[caption_idx]
            x_video = dataset.train_videos[video_of[caption_idx]]
            t_unit, t_norms = _encode(state.w_text, x_text)
            v_unit, v_norms = _encode(state.w_video, x_video)
            t_set = EmbeddingSet(Modality.TEXT, t_unit)
            v_set = EmbeddingSet(Modality.VIDEO, v_unit)
            if config.loss_kind is LossKind.NCL:
                loss, grads, _ = ncl_loss(t_set, v_set, config.gamma, config.sinkhorn)
            else:
                loss, grads = contrastive_loss(t_set, v_set, config.gamma)
            if not np.isfinite(loss.total):
                raise NonFinite(
                    f"non-finite loss at epoch {epoch}, step {start // config.batch_size}"
                )
            state.w_text -= config.learning_rate * _weight_grad(x_text, t_unit, t_norms, grads.d_text)
            state.w_video -= config.learning_rate * _weight_grad(
                x_video, v_unit, v_norms, grads.d_video
            )
            state.text_queue.push_batch(t_unit)
            state.video_queue.push_batch(v_unit)
            step_losses.append(loss.total)
        mean_loss = float(np.mean(step_losses)) if step_losses else None
        record, queue_prov_epoch = _evaluate_epoch(epoch, mean_loss, state)
        records.append(record)
        if queue_prov_epoch is not None:
            queue_prov = queue_prov_epoch

    return RunRecord(
        epochs=records,
        wall_clock_s=time.perf_counter() - t_start,
        config_hash=config_hash(spec, config),
        final_queue_provenance=queue_prov,
        state=state,
    )


def sweep_from_state(state: TrainState, sizes) -> list[tuple[int, float, float]]:
    """Re-evaluate test-time normalization with queues truncated to each size.

    Sizes are deduplicated and sorted; each is clamped to the entries
    available. Returns rows of (requested size, t2v R@1, v2t R@1).
    """
    sizes = sorted({int(s) for s in sizes})
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if any(s < 1 for s in sizes):
        raise ValueError("queue sizes must be >= 1")
    ds = state.dataset
    config = state.config
    texts = _embed_set(state.w_text, ds.test_texts, Modality.TEXT)
    videos = _embed_set(state.w_video, ds.test_videos, Modality.VIDEO)
    prior = _split_prior(texts.n, videos.n, ds.test_gt)
    sims = cosine_similarity_matrix(texts, videos)
    rows = []
    for size in sizes:
        tq = state.text_queue.truncated(size)
        vq = state.video_queue.truncated(size)
        video_side = test_time_biases(tq, videos, config.gamma, config.sinkhorn)
        text_side = test_time_biases(vq, texts, config.gamma, config.sinkhorn)
        adjusted = apply_test_biases(sims, t2v_biases=video_side, v2t_biases=text_side)
        t2v, v2t = _metrics_both_directions(adjusted, ds.test_gt, config.gamma, (1,), prior)
        rows.append((size, t2v.recall_at[1], v2t.recall_at[1]))
    return rows


def queue_size_sweep(
    spec: SyntheticDatasetSpec, config: TrainConfig, sizes
) -> list[tuple[int, float, float]]:
    """Train once, then evaluate test retrieval for each truncated queue size."""
    record = train(spec, config)
    return sweep_from_state(record.state, sizes)
