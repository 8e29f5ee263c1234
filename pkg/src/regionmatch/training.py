"""Episodic training with a pairwise MSE objective, Adam with plateau
halving, K-shot score aggregation, and the evaluation protocol.

The loss for one episode sums, over every (support, query) pair, the
squared gap between the predicted pair similarity and the 0/1 indicator of
matching class. Support and query images share one backbone forward pass
per episode (batch-norm statistics are computed over the whole episode
batch during training; evaluation uses running statistics and is
per-sample deterministic).
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import BackboneConfig, ConvBackbone, preset_config
from .episodes import AugmentPolicy, Episode, LabeledDataset, sample_episode
from .matching import RegionMatcher, SimilarityMetric
from .modules import Module
from .tensor import Tensor, backward, index_select, mul, no_grad, tsum
from .tensor.serialize import load_arrays, save_arrays
from .weighting import build_head

AGGREGATES = ("mean", "max")


class RegionMatchModel(Module):
    """Backbone + parameter-free matcher + weighting head."""

    def __init__(
        self,
        backbone_config: BackboneConfig,
        head: str = "meta",
        metric: SimilarityMetric = SimilarityMetric(),
        hidden: int = 64,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.backbone = ConvBackbone(backbone_config, rng=rng, dtype=dtype)
        self.matcher = RegionMatcher(metric)
        h, w = backbone_config.output_hw()
        self.head = build_head(
            head, backbone_config.channels, h * w, hidden=hidden, rng=rng, dtype=dtype
        )
        self.hidden = hidden

    def pair_scores(self, support_images, query_images) -> Tensor:
        """Similarity of every support image to every query image: (S, Q).

        Both stacks go through the backbone in a single batch so training
        batch-norm statistics cover the whole episode.
        """
        support_images = np.asarray(support_images)
        query_images = np.asarray(query_images)
        s, q = support_images.shape[0], query_images.shape[0]
        batch = Tensor(np.concatenate([support_images, query_images], axis=0))
        feats = self.backbone(batch)
        sup_feats = index_select(feats, 0, np.arange(s))
        qry_feats = index_select(feats, 0, np.arange(s, s + q))
        scores, _ = self.matcher(sup_feats, qry_feats)  # (S, Q, hw)
        weights = self.head(sup_feats, qry_feats)       # (S, Q, hw) or broadcastable
        return tsum(mul(weights, scores), axis=-1)

    def config_dict(self) -> dict:
        cfg = self.backbone.config
        return {
            "backbone": {
                "blocks": cfg.blocks,
                "channels": cfg.channels,
                "in_channels": cfg.in_channels,
                "input_hw": list(cfg.input_hw),
                "spatial_target": list(cfg.spatial_target) if cfg.spatial_target else None,
            },
            "head": self.head.kind,
            "metric": self.matcher.metric.name,
            "epsilon": self.matcher.metric.epsilon,
            "hidden": self.hidden,
        }


def build_model(
    backbone: str = "conv4-64",
    input_hw=(32, 32),
    spatial_target=None,
    head: str = "meta",
    metric: str = "cosine",
    hidden: int = 64,
    seed: int = 0,
    blocks: Optional[int] = None,
    dtype=np.float32,
) -> RegionMatchModel:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cfg = preset_config(backbone, input_hw=input_hw, spatial_target=spatial_target)
    if blocks is not None:
        cfg.blocks = blocks
    return RegionMatchModel(
        cfg, head=head, metric=SimilarityMetric(metric), hidden=hidden, rng=rng, dtype=dtype
    )


def model_from_config(config: dict, rng=None, dtype=np.float32) -> RegionMatchModel:
    bb = config["backbone"]
    cfg = BackboneConfig(
        blocks=bb["blocks"],
        channels=bb["channels"],
        in_channels=bb["in_channels"],
        input_hw=tuple(bb["input_hw"]),
        spatial_target=tuple(bb["spatial_target"]) if bb.get("spatial_target") else None,
    )
    return RegionMatchModel(
        cfg,
        head=config["head"],
        metric=SimilarityMetric(config["metric"], config.get("epsilon", 1e-8)),
        hidden=config.get("hidden", 64),
        rng=rng,
        dtype=dtype,
    )


def save_checkpoint(model: RegionMatchModel, directory) -> Path:
    return save_arrays(directory, model.state_dict(), metadata={"model": model.config_dict()})


def load_checkpoint(directory, dtype=np.float32) -> RegionMatchModel:
    arrays, metadata = load_arrays(directory)
    if "model" not in metadata:
        raise ValueError(f"checkpoint at {directory} lacks model metadata")
    model = model_from_config(metadata["model"], dtype=dtype)
    model.load_state_dict(arrays)
    return model.eval()


# --- loss and classification -------------------------------------------------------

def episode_loss(episode: Episode, model: RegionMatchModel) -> Tensor:
    """Sum of squared pair errors against the same-class 0/1 target."""
    scores = model.pair_scores(episode.support_images, episode.query_images)
    targets = (
        episode.support_labels[:, None] == episode.query_labels[None, :]
    ).astype(scores.dtype)
    diff = scores - Tensor(targets)
    return tsum(mul(diff, diff))


def _class_scores(pair_scores: np.ndarray, n_way: int, k_shot: int, aggregate: str) -> np.ndarray:
    """(N*K, Q) pair scores -> (N, Q) class scores (support is class-major)."""
    grouped = pair_scores.reshape(n_way, k_shot, -1)
    if aggregate == "mean":
        return grouped.mean(axis=1)
    if aggregate == "max":
        return grouped.max(axis=1)
    raise ValueError(f"unknown aggregate {aggregate!r}; choose from {AGGREGATES}")


def classify(
    query_image: np.ndarray,
    support_images: np.ndarray,
    support_labels: np.ndarray,
    model: RegionMatchModel,
    aggregate: str = "mean",
) -> tuple[int, np.ndarray]:
    """Predict the episode-local label of one query sample.

    The score of a class is the mean (or max) of the pair scores against
    its K support samples; ties resolve to the lowest class index.
    """
    support_labels = np.asarray(support_labels)
    n_way = int(support_labels.max()) + 1
    order = np.argsort(support_labels, kind="stable")  # class-major support order
    with no_grad():
        scores = model.pair_scores(
            np.asarray(support_images)[order], np.asarray(query_image)[None]
        ).data
    k_shot = len(support_labels) // n_way
    per_class = _class_scores(scores, n_way, k_shot, aggregate)[:, 0]
    return int(np.argmax(per_class)), per_class


def _episode_pair_scores(model, episode: Episode) -> np.ndarray:
    if hasattr(model, "episode_scores"):
        return np.asarray(model.episode_scores(episode))
    with no_grad():
        out = model.pair_scores(episode.support_images, episode.query_images)
    return np.asarray(getattr(out, "data", out))


def episode_accuracy(model, episode: Episode, aggregate: str = "mean") -> float:
    scores = _episode_pair_scores(model, episode)
    per_class = _class_scores(scores, episode.n_way, episode.k_shot, aggregate)
    preds = np.argmax(per_class, axis=0)
    return float(np.mean(preds == episode.query_labels))


# --- scorer stubs (diagnostics for the evaluation protocol) -------------------------

class OracleScorer:
    """Scores 1 for matching pairs and 0 otherwise; always 100% accurate."""

    def episode_scores(self, episode: Episode) -> np.ndarray:
        return (
            episode.support_labels[:, None] == episode.query_labels[None, :]
        ).astype(np.float64)


class RandomScorer:
    """Uniform-random pair scores; 5-way accuracy should hover at 20%."""

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def episode_scores(self, episode: Episode) -> np.ndarray:
        return self._rng.uniform(
            size=(len(episode.support_labels), len(episode.query_labels))
        )


# --- evaluation protocol --------------------------------------------------------------

@dataclass
class EvalReport:
    mean_accuracy: float  # percent
    half_width: float     # percent, 95% confidence
    per_episode: list[float] = field(repr=False, default_factory=list)

    def format(self) -> str:
        return f"{self.mean_accuracy:.2f} ± {self.half_width:.2f}"


def confidence_half_width(per_episode: list[float]) -> float:
    """1.96 * stdev / sqrt(n) over per-episode accuracies (sample stdev)."""
    n = len(per_episode)
    if n < 2:
        return 0.0
    return 1.96 * float(np.std(per_episode, ddof=1)) / math.sqrt(n)


def make_report(per_episode: list[float]) -> EvalReport:
    accs = [float(a) for a in per_episode]
    return EvalReport(
        mean_accuracy=100.0 * float(np.mean(accs)),
        half_width=100.0 * confidence_half_width(accs),
        per_episode=accs,
    )


def evaluate(
    model,
    dataset: LabeledDataset,
    split: str,
    episodes: int,
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    seed: int = 0,
    aggregate: str = "mean",
    threads: int = 1,
) -> EvalReport:
    """Accuracy over freshly sampled episodes; deterministic under ``seed``.

    Episodes are sampled without augmentation. With ``threads`` > 1 the
    episodes run concurrently against read-only parameters; per-episode
    seeds are pre-spawned so the schedule cannot change the result.
    """
    seeds = np.random.SeedSequence(seed).spawn(episodes)

    def run_one(i: int) -> float:
        rng = np.random.default_rng(seeds[i])
        ep = sample_episode(dataset, split, n_way, k_shot, queries_per_class, rng)
        return episode_accuracy(model, ep, aggregate)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(run_one, range(episodes)))
    else:
        accs = [run_one(i) for i in range(episodes)]
    return make_report(accs)


# --- optimizer --------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._t += 1
        b1c = 1.0 - self.beta1 ** self._t
        b2c = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data = p.data - (p.data.dtype.type(self.lr) * update).astype(p.data.dtype)


# --- training loop -----------------------------------------------------------------------

@dataclass
class TrainConfig:
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    learning_rate: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    max_halvings: int = 6
    episodes_per_iteration: int = 500
    val_episodes: int = 600
    test_episodes: int = 600
    max_iterations: int = 30
    seed: int = 0
    backbone: str = "conv4-64"
    spatial_target: Optional[tuple[int, int]] = None
    head: str = "meta"
    metric: str = "cosine"
    hidden: int = 64
    aggregate: str = "mean"
    augment: Optional[AugmentPolicy] = field(default_factory=AugmentPolicy)
    val_split: str = "val"  # splits without val classes may schedule on "train"
    threads: int = 1


@dataclass
class TrainResult:
    model: RegionMatchModel
    log: list[dict]
    best_val_accuracy: float
    diverged: bool = False


def _validation_way(config: TrainConfig, dataset: LabeledDataset) -> int:
    """Validation episodes shrink to the split's class count when needed."""
    if config.val_split == "train":
        return config.n_way
    available = len(dataset.classes_in_split(config.val_split))
    return min(config.n_way, max(2, available))


def train(
    config: TrainConfig,
    dataset: LabeledDataset,
    out_dir=None,
    progress=None,
) -> TrainResult:
    """Meta-train a model on the dataset's train split.

    Each iteration runs ``episodes_per_iteration`` training episodes, then
    validates; the learning rate halves after ``plateau_patience``
    iterations without a new best validation accuracy, and training stops
    after ``max_halvings`` halvings (or the iteration cap, or divergence).
    The returned model carries the best-validation parameters.
    """
    root = np.random.SeedSequence(config.seed)
    init_seed, episode_seed, val_seed = root.spawn(3)
    model = RegionMatchModel(
        preset_config(
            config.backbone,
            input_hw=dataset.image_hw,
            spatial_target=config.spatial_target,
        ),
        head=config.head,
        metric=SimilarityMetric(config.metric),
        hidden=config.hidden,
        rng=np.random.default_rng(init_seed),
    )
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    episode_rng = np.random.default_rng(episode_seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "training_log.jsonl"
        log_path.write_text("")

    best_acc = -1.0
    best_state = model.state_dict()
    bad_iterations = 0
    halvings = 0
    log: list[dict] = []
    diverged = False

    for iteration in range(config.max_iterations):
        model.train()
        losses = []
        t0 = time.perf_counter()
        for _ in range(config.episodes_per_iteration):
            episode = sample_episode(
                dataset, "train", config.n_way, config.k_shot,
                config.queries_per_class, episode_rng, augment=config.augment,
            )
            optimizer.zero_grad()
            loss = episode_loss(episode, model)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                diverged = True
                break
            backward(loss)
            optimizer.step()
            losses.append(loss_value)
        if diverged:
            break

        model.eval()
        report = evaluate(
            model, dataset, config.val_split, config.val_episodes,
            _validation_way(config, dataset),
            config.k_shot, config.queries_per_class,
            seed=int(val_seed.generate_state(1)[0]) + iteration,
            aggregate=config.aggregate, threads=config.threads,
        )
        val_acc = report.mean_accuracy
        improved = val_acc > best_acc
        if improved:
            best_acc = val_acc
            best_state = model.state_dict()
            bad_iterations = 0
        else:
            bad_iterations += 1
            if bad_iterations >= config.plateau_patience:
                optimizer.lr *= config.plateau_factor
                halvings += 1
                bad_iterations = 0

        record = {
            "iteration": iteration,
            "train_loss_mean": float(np.mean(losses)) if losses else None,
            "val_accuracy": val_acc,
            "val_half_width": report.half_width,
            "learning_rate": optimizer.lr,
            "improved": improved,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        log.append(record)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if progress is not None:
            progress(record)
        if halvings > config.max_halvings:
            break

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint")
    return TrainResult(
        model=model, log=log, best_val_accuracy=best_acc, diverged=diverged
    )
