"""Sequential training protocol: source model, per-corpus adapters or finetuning, routed evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, split_corpus
from .errors import BaseMutated, FingerprintMismatch, OneClassOnly, ValidationError
from .io_utils import atomic_write_text
from .lfcc import LfccConfig, lfcc
from .lora import AdapterSet, init_adapters, save_adapters
from .metrics import ScoreRecord, compute_eer, write_scores
from .senet import ModelParams, SENetConfig, build_model, forward, save_checkpoint, score

log = logging.getLogger(__name__)

MODES = ("lora", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.001
    epochs: int = 10
    seed: int = 0
    mode: str = "lora"
    rank: int = 4
    adapter_targets: tuple[str, ...] | None = None  # None: every plain linear map
    scaling: float = 1.0
    paper_literal_init: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")


@dataclass
class Features:
    x: np.ndarray  # N x 1 x frames x dims, engine dtype
    y: np.ndarray  # 0 = bonafide, 1 = spoof
    utt_ids: list[str]
    labels: list[str]
    tag: str


def featurize(corpus: Corpus, cfg: LfccConfig = LfccConfig()) -> Features:
    """LFCC maps for a corpus, ordered by utt_id."""
    order = sorted(range(len(corpus)), key=lambda i: corpus.entries[i][0].utt_id)
    maps = [lfcc(corpus.entries[i][1], cfg) for i in order]
    x = np.stack(maps)[:, None].astype(ad.get_dtype())
    entries = [corpus.entries[i][0] for i in order]
    y = np.array([0 if e.is_bonafide else 1 for e in entries], dtype=np.int64)
    return Features(x, y, [e.utt_id for e in entries], [e.label for e in entries], corpus.tag)


def _as_features(data, lfcc_cfg: LfccConfig) -> Features:
    return data if isinstance(data, Features) else featurize(data, lfcc_cfg)


def stratified_batches(y: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle each class, interleave them proportionally, drop the last partial batch."""
    keys = np.empty(y.size)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        keys[rng.permutation(idx)] = (np.arange(idx.size) + 0.5) / idx.size
    order = np.lexsort((y, keys))
    n_full = y.size // batch_size
    return [order[k * batch_size : (k + 1) * batch_size] for k in range(n_full)]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _require_both(y: np.ndarray, tag: str) -> None:
    if np.unique(y).size < 2:
        raise OneClassOnly(f"corpus {tag} needs both bonafide and spoof utterances")


def _fit(model: ModelParams, adapters: AdapterSet | None, params: list, feats: Features, cfg: TrainConfig) -> TrainResult:
    _require_both(feats.y, feats.tag)
    if feats.y.size < cfg.batch_size:
        raise ValidationError(f"corpus {feats.tag} has {feats.y.size} utterances, fewer than batch_size {cfg.batch_size}")
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(lr=cfg.lr)
    base = model.parameters()
    result = TrainResult()
    for epoch in range(cfg.epochs):
        total = 0.0
        batches = stratified_batches(feats.y, cfg.batch_size, rng)
        for idx in batches:
            for p in params:
                p.grad = None
            loss = ad.softmax_cross_entropy(forward(model, feats.x[idx], adapters), feats.y[idx])
            ad.backward(loss, params)
            if adapters is not None:
                assert all(t.grad is None for t in base), "base tensor received a gradient in lora mode"
            ad.adam_step(params, state)
            total += loss.item()
        result.losses.append(total / len(batches))
        log.info("%s epoch %d loss %.5f", feats.tag, epoch + 1, result.losses[-1])
    return result


def train_base(corpus, cfg: TrainConfig, model_cfg: SENetConfig = SENetConfig(), lfcc_cfg: LfccConfig = LfccConfig()):
    """Train the source model on the first corpus; returns (model, TrainResult)."""
    feats = _as_features(corpus, lfcc_cfg)
    _require_both(feats.y, feats.tag)
    model = build_model(model_cfg, cfg.seed)
    model.fit_input_norm(feats.x)
    model.set_trainable(True)
    result = _fit(model, None, model.parameters(), feats, cfg)
    return model, result


def train_adapter(base: ModelParams, corpus, cfg: TrainConfig, lfcc_cfg: LfccConfig = LfccConfig(), tag: str | None = None):
    """Train one adapter set with the base frozen; returns (AdapterSet, TrainResult)."""
    if cfg.mode != "lora":
        raise ValidationError("train_adapter needs mode 'lora'")
    feats = _as_features(corpus, lfcc_cfg)
    _require_both(feats.y, feats.tag)
    base.set_trainable(False)
    before = base.fingerprint()
    targets = cfg.adapter_targets if cfg.adapter_targets is not None else base.cfg.default_adapter_targets()
    adapters = init_adapters(
        base,
        targets,
        cfg.rank,
        cfg.seed,
        scaling=cfg.scaling,
        clamp_rank=True,
        paper_literal_init=cfg.paper_literal_init,
        tag=tag if tag is not None else feats.tag,
    )
    result = _fit(base, adapters, adapters.parameters(), feats, cfg)
    after = base.fingerprint()
    if after != before:
        raise BaseMutated(f"base fingerprint changed from {before:016x} to {after:016x} during adapter training")
    for p in adapters.parameters():
        p.requires_grad = False
        p.grad = None
    return adapters, result


def finetune(base: ModelParams, corpus, cfg: TrainConfig, lfcc_cfg: LfccConfig = LfccConfig()):
    """Continue full-model training on a copy of ``base``; returns (model, TrainResult)."""
    feats = _as_features(corpus, lfcc_cfg)
    _require_both(feats.y, feats.tag)
    model = base.copy()
    model.set_trainable(True)
    result = _fit(model, None, model.parameters(), feats, cfg)
    return model, result


def score_features(model: ModelParams, feats: Features, adapters: AdapterSet | None = None, batch_size: int = 64, jobs: int = 1) -> np.ndarray:
    starts = range(0, feats.y.size, batch_size)

    def run(s):
        with ad.no_grad():
            return score(forward(model, feats.x[s : s + batch_size], adapters))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts).astype(np.float64)


def evaluate(base: ModelParams, adapters: AdapterSet | None, corpus, lfcc_cfg: LfccConfig = LfccConfig(), score_path=None, jobs: int = 1):
    """Score every utterance; returns (EER in [0, 1], records sorted by utt_id)."""
    if adapters is not None and adapters.base_fingerprint != base.fingerprint():
        raise FingerprintMismatch(
            f"adapter set {adapters.tag!r} was trained against base {adapters.base_fingerprint:016x}, not {base.fingerprint():016x}"
        )
    feats = _as_features(corpus, lfcc_cfg)
    scores = score_features(base, feats, adapters, jobs=jobs)
    records = [ScoreRecord(u, float(s), lab) for u, s, lab in zip(feats.utt_ids, scores, feats.labels)]
    if score_path is not None:
        write_scores(records, score_path)
    eer, _ = compute_eer(records)
    return eer, records


# -- sequences -------------------------------------------------------------


@dataclass
class SequencePlan:
    corpora: list[tuple[str, Corpus]]
    mode: str = "lora"
    train_fraction: float = 1 / 3
    split_seed: int = 0
    note: str = ""

    def __post_init__(self):
        tags = [t for t, _ in self.corpora]
        if not tags:
            raise ValidationError("a sequence needs at least one corpus")
        if len(set(tags)) != len(tags):
            raise ValidationError(f"corpus tags must be unique, got {tags}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.corpora]


def row_name(i: int, tags: list[str]) -> str:
    return "SoM" if i == 0 else f"after-{tags[i]}"


@dataclass
class ReportMatrix:
    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], float] = field(default_factory=dict)  # EER %

    def __getitem__(self, key: tuple[str, str]) -> float:
        return self.cells[key]

    def to_text(self) -> str:
        width = max(len(r) for r in self.rows) + 2
        lines = ["EER(%)".ljust(width) + "".join(c.rjust(10) for c in self.cols)]
        for r in self.rows:
            lines.append(r.ljust(width) + "".join(f"{self.cells[(r, c)]:10.2f}" for c in self.cols))
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        return "".join(f"cell.{r}.{c}={self.cells[(r, c)]:.6f}\n" for r in self.rows for c in self.cols)

    @classmethod
    def from_kv(cls, text: str) -> "ReportMatrix":
        rows: list[str] = []
        cols: list[str] = []
        cells = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = line.split("=", 1)
            _, r, c = key.split(".", 2)
            rows += [r] if r not in rows else []
            cols += [c] if c not in cols else []
            cells[(r, c)] = float(value)
        return cls(rows, cols, cells)


@dataclass
class SequenceResult:
    report: ReportMatrix
    base: ModelParams
    adapters: dict[str, AdapterSet]
    models: dict[str, ModelParams]  # finetune mode: row -> model
    base_fingerprint_start: int
    base_fingerprint_end: int


def run_sequence(
    plan: SequencePlan,
    cfg: TrainConfig,
    model_cfg: SENetConfig = SENetConfig(),
    lfcc_cfg: LfccConfig = LfccConfig(),
    out_dir=None,
) -> SequenceResult:
    """Train on the first corpus, then adapt (lora) or finetune on each later one.

    Cell (row, col) is the EER % on ``col``'s evaluation split for the model
    state after ``row``. In lora mode a column is routed to its own adapter
    set once that set exists, otherwise to the bare base model.
    """
    tags = plan.tags
    splits = {t: split_corpus(c, plan.train_fraction, plan.split_seed) for t, c in plan.corpora}
    train_feats = {t: featurize(splits[t][0], lfcc_cfg) for t in tags}
    eval_feats = {t: featurize(splits[t][1], lfcc_cfg) for t in tags}
    out = Path(out_dir) if out_dir is not None else None
    rows = [row_name(i, tags) for i in range(len(tags))]
    report = ReportMatrix(rows, list(tags))

    def cell(row: str, col: str, model: ModelParams, adapters: AdapterSet | None) -> None:
        path = out / "scores" / f"{row}__{col}.txt" if out is not None else None
        eer, _ = evaluate(model, adapters, eval_feats[col], lfcc_cfg, score_path=path)
        report.cells[(row, col)] = 100.0 * eer

    base, _ = train_base(train_feats[tags[0]], cfg, model_cfg, lfcc_cfg)
    base.set_trainable(False)
    fp_start = base.fingerprint()
    if out is not None:
        save_checkpoint(base, out / "base.fadckpt")
    for col in tags:
        cell(rows[0], col, base, None)

    adapters: dict[str, AdapterSet] = {}
    models = {rows[0]: base}
    current = base
    for i, tag in enumerate(tags[1:], start=1):
        row = rows[i]
        if plan.mode == "lora":
            aset, _ = train_adapter(base, train_feats[tag], cfg, lfcc_cfg, tag=tag)
            adapters[tag] = aset
            if out is not None:
                save_adapters(aset, out / "adapters" / f"{tag}.fadlora")
            for col in tags:
                cell(row, col, base, adapters.get(col))
        else:
            current, _ = finetune(current, train_feats[tag], cfg, lfcc_cfg)
            current.set_trainable(False)
            models[row] = current
            if out is not None:
                save_checkpoint(current, out / "finetune" / f"{row}.fadckpt")
            for col in tags:
                cell(row, col, current, None)
    fp_end = base.fingerprint()
    if fp_end != fp_start:
        raise BaseMutated("base checkpoint changed during the sequence")
    if out is not None:
        header = f"# mode={plan.mode} corpora={','.join(tags)}"
        if plan.note:
            header += f" note={plan.note}"
        atomic_write_text(out / "report.txt", header + "\n" + report.to_text())
        atomic_write_text(out / "report.kv", report.to_kv())
    return SequenceResult(report, base, adapters, models, fp_start, fp_end)
