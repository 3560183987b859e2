"""The three training stages: overall sentiment, aspect category detection,
and the mixture-of-experts aspect sentiment head."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .losses import LossWeights, aux_importance, binary_cross_entropy, cce, cov2, mse_uniform, total_loss
from .metrics import ClassificationReport, classification_report, multilabel_report, pr_curves
from .moe import (
    GateConfig,
    GateScores,
    MoELayer,
    MoEOutput,
    RoutingPlan,
    combine,
    expert_forward,
    hard_gate_plan,
    hard_gate_route,
)
from .text import (
    ASPECTS,
    SENTIMENTS,
    DatasetSplit,
    EmbeddingProvider,
    ReviewRecord,
    SpellingTable,
    normalize_text,
)

log = logging.getLogger(__name__)

STAGES = ("sentiment", "acd", "absa")
STAGE_DEFAULTS = {
    "sentiment": {"learning_rate": 2e-5, "batch_size": 32, "epochs": 4},
    "acd": {"learning_rate": 1.7e-5, "batch_size": 8, "epochs": 4},
    "absa": {"learning_rate": 1.8552e-5, "batch_size": 8, "epochs": 3},
}
COV2_WINDOW = 10


class UsageError(ValueError):
    pass


@dataclass
class StageConfig:
    stage: str
    learning_rate: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    seed: int = 42
    gate: GateConfig = field(default_factory=GateConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    routing: str = "dynamic"
    hidden: int = 256
    gate_input: str = "aspect"
    class_weighting: bool = False
    drop_empty: bool = True
    acd_threshold: float = 0.5
    trace: bool = True
    # stress knob: extra initial gate bias on expert 0
    gate_skew: float = 0.0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise UsageError(f"unknown stage {self.stage!r}")
        for k, v in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.routing not in ("dynamic", "hard_gate"):
            raise UsageError(f"unknown routing {self.routing!r}")
        if self.gate_input not in ("aspect", "aspect+sentence"):
            raise UsageError(f"unknown gate_input {self.gate_input!r}")
        if self.routing == "hard_gate" and self.gate.n_experts != len(ASPECTS):
            raise UsageError("hard_gate routing needs exactly one expert per aspect")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StageConfig:
        d = dict(d)
        d["gate"] = GateConfig(**d.get("gate", {}))
        d["loss_weights"] = LossWeights(**d.get("loss_weights", {}))
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- features -------------------------------------------------------------------

class Featurizer:
    """Normalizes review text and caches provider vectors per record."""

    def __init__(self, provider: EmbeddingProvider, spelling: SpellingTable | None = None):
        self.provider = provider
        self.spelling = spelling
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.provider.dim

    def vector(self, rec: ReviewRecord) -> np.ndarray:
        key = (rec.id, rec.text)
        v = self._cache.get(key)
        if v is None:
            v = self.provider.embed(normalize_text(rec.text, self.spelling), rec.id)
            self._cache[key] = v
        return v

    def matrix(self, records: Sequence[ReviewRecord]) -> np.ndarray:
        if not records:
            return np.zeros((0, self.dim))
        return np.vstack([self.vector(r) for r in records])

    def aspects(self, aspects: Sequence[str]) -> np.ndarray:
        if not aspects:
            return np.zeros((0, self.dim))
        return np.vstack([self.provider.aspect_embedding(a) for a in aspects])


@dataclass
class Triple:
    record: ReviewRecord
    aspect: str
    sentiment: str


def expand_triples(records: Sequence[ReviewRecord]) -> list[Triple]:
    return [Triple(r, a, r.sentiments[a]) for r in records for a in ASPECTS if a in r.sentiments]


def one_hot(idx: Sequence[int], n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(idx, dtype=int)]


def _batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _class_weight_matrix(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.where(counts > 0, len(labels) / (n_classes * np.maximum(counts, 1)), 0.0)
    return w.reshape(1, -1)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MOE_ABSA_THREADS", "1")))
    except ValueError:
        return 1


# --- models -----------------------------------------------------------------------

class LinearModel:
    """d -> n_out linear head; softmax for sentiment, per-label sigmoid for ACD."""

    def __init__(self, stage: str, dim: int, config: StageConfig, rng: np.random.Generator, provider_info: dict | None = None):
        self.stage = stage
        self.dim = dim
        self.config = config
        self.provider_info = provider_info or {}
        n_out = len(SENTIMENTS) if stage == "sentiment" else len(ASPECTS)
        self.classes = list(SENTIMENTS if stage == "sentiment" else ASPECTS)
        self.w = ad.parameter(rng.normal(0.0, 0.02, (dim, n_out)))
        self.b = ad.parameter(np.zeros((1, n_out)))

    def parameters(self) -> dict[str, Tensor]:
        return {"head.w": self.w, "head.b": self.b}

    def logits(self, x: Tensor) -> Tensor:
        return ad.add_row(ad.matmul(x, self.w), self.b)

    def output(self, x: Tensor) -> Tensor:
        z = self.logits(x)
        return ad.softmax_rows(z) if self.stage == "sentiment" else ad.sigmoid(z)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.output(ad.constant(x)).values


class ABSAModel:
    stage = "absa"

    def __init__(self, dim: int, config: StageConfig, rng: np.random.Generator, provider_info: dict | None = None):
        self.dim = dim
        self.config = config
        self.provider_info = provider_info or {}
        self.classes = list(SENTIMENTS)
        d_gate = dim * 2 if config.gate_input == "aspect+sentence" else dim
        self.layer = MoELayer(dim, d_gate, config.gate, hidden=config.hidden, n_out=len(SENTIMENTS), rng=rng)
        self.layer.gate.b2.values[0, 0] += config.gate_skew

    def parameters(self) -> dict[str, Tensor]:
        return self.layer.parameters()

    def gate_input(self, x: np.ndarray, a: np.ndarray) -> Tensor:
        if self.config.gate_input == "aspect+sentence":
            return ad.constant(np.hstack([a, x]))
        return ad.constant(a)

    def forward(self, x: np.ndarray, a: np.ndarray, aspects: Sequence[str], train: bool = False, rng: np.random.Generator | None = None) -> MoEOutput:
        xt = ad.constant(x)
        if self.config.routing == "hard_gate":
            plan = hard_gate_plan(aspects, self.config.gate.n_experts)
            # the fixed mapping carries no gate gradient; report it as one-hot routing
            onehot = ad.constant(one_hot([hard_gate_route(s) for s in aspects], self.config.gate.n_experts))
            outs = expert_forward(self.layer.experts, xt, plan)
            logits = combine(plan, ad.constant(np.zeros(onehot.shape)), outs)
            return MoEOutput(logits, GateScores(onehot, onehot), plan)
        return self.layer(xt, self.gate_input(x, a), train=train, rng=rng)

    def predict(self, x: np.ndarray, a: np.ndarray, aspects: Sequence[str]) -> tuple[np.ndarray, MoEOutput]:
        out = self.forward(x, a, aspects, train=False)
        return ad.softmax_rows(out.logits).values, out


Model = LinearModel | ABSAModel


# --- results ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    report: ClassificationReport
    final_loss: float
    rng: np.random.Generator
    heatmap: np.ndarray | None = None
    traces: list[dict] = field(default_factory=list)
    cov2: dict | None = None


@dataclass
class EvalResult:
    report: ClassificationReport
    curves: dict
    cov2: dict | None
    heatmap: np.ndarray | None
    probs: np.ndarray
    truth: np.ndarray

    def metrics_document(self, extra: dict | None = None) -> dict:
        r = self.report
        doc = {
            "per_class": r.per_class,
            "weighted": r.weighted,
            "micro": r.micro,
            "macro": r.macro,
            "confusion": r.confusion,
            "n_samples": r.n_samples,
        }
        if r.accuracy is not None:
            doc["accuracy"] = r.accuracy
        if self.cov2 is not None:
            doc.update({f"cov2_{k}": v for k, v in self.cov2.items()})
        if extra:
            doc.update(extra)
        return doc


# --- training loops ---------------------------------------------------------------

def _provider_info(provider: EmbeddingProvider) -> dict:
    return provider.describe()


def _adam_loop(model, params, batches_fn, loss_fn, config: StageConfig, rng: np.random.Generator, on_epoch) -> tuple[list[dict], float]:
    state = AdamState.zeros_like(params)
    history = []
    last = float("nan")
    step = 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in batches_fn(rng):
            ad.zero_grads(params.values())
            loss = loss_fn(idx, step)
            ad.backward(loss)
            ad.adam_step(params, state, config.learning_rate)
            total += loss.item() * len(idx)
            count += len(idx)
            step += 1
        last = total / max(count, 1)
        entry = {"epoch": epoch, "train_loss": last}
        entry.update(on_epoch(epoch))
        history.append(entry)
        log.info("%s epoch %d loss %.6f", config.stage, epoch, last)
    return history, last


def train_sentiment(split: DatasetSplit, config: StageConfig, provider: EmbeddingProvider, spelling: SpellingTable | None = None) -> TrainResult:
    train = [r for r in split.train if r.overall_sentiment is not None]
    val = [r for r in split.validation if r.overall_sentiment is not None]
    if not train:
        raise UsageError("no records with an overall sentiment label")
    feats = Featurizer(provider, spelling)
    rng = np.random.default_rng(config.seed)
    model = LinearModel("sentiment", feats.dim, config, rng, _provider_info(provider))
    X = feats.matrix(train)
    y = np.array([SENTIMENTS.index(r.overall_sentiment) for r in train])
    Y = one_hot(y, 3)
    cw = _class_weight_matrix(y, 3) if config.class_weighting else None
    params = model.parameters()

    def loss_fn(idx, step):
        probs = model.output(ad.constant(X[idx]))
        target = Y[idx] * cw if cw is not None else Y[idx]
        return cce(probs, target)

    reports = []

    def on_epoch(epoch):
        if not val:
            return {}
        ev = evaluate(model, val, provider, spelling=spelling, featurizer=feats)
        reports.append(ev.report)
        return {"val_weighted_f1": ev.report.weighted["f1"], "val_report": ev.report.to_dict()}

    history, last = _adam_loop(model, params, lambda r: _batches(len(train), config.batch_size, r), loss_fn, config, rng, on_epoch)
    report = reports[-1] if reports else evaluate(model, train, provider, spelling=spelling, featurizer=feats).report
    return TrainResult(model, history, report, last, rng)


def acd_targets(records: Sequence[ReviewRecord]) -> np.ndarray:
    return np.array([[1.0 if a in r.aspects else 0.0 for a in ASPECTS] for r in records]).reshape(-1, len(ASPECTS))


def train_acd(split: DatasetSplit, config: StageConfig, provider: EmbeddingProvider, spelling: SpellingTable | None = None) -> TrainResult:
    keep = (lambda r: bool(r.aspects)) if config.drop_empty else (lambda r: True)
    train = [r for r in split.train if keep(r)]
    val = [r for r in split.validation if keep(r)]
    if not train:
        raise UsageError("no training records for aspect detection")
    feats = Featurizer(provider, spelling)
    rng = np.random.default_rng(config.seed)
    model = LinearModel("acd", feats.dim, config, rng, _provider_info(provider))
    X = feats.matrix(train)
    T = acd_targets(train)
    params = model.parameters()

    def loss_fn(idx, step):
        return binary_cross_entropy(model.output(ad.constant(X[idx])), T[idx])

    reports = []

    def on_epoch(epoch):
        if not val:
            return {}
        ev = evaluate(model, val, provider, spelling=spelling, featurizer=feats)
        reports.append(ev.report)
        return {"val_weighted_f1": ev.report.weighted["f1"], "val_report": ev.report.to_dict()}

    history, last = _adam_loop(model, params, lambda r: _batches(len(train), config.batch_size, r), loss_fn, config, rng, on_epoch)
    report = reports[-1] if reports else evaluate(model, train, provider, spelling=spelling, featurizer=feats).report
    return TrainResult(model, history, report, last, rng)


def trace_rows(step: int, plan: RoutingPlan, aspects: Sequence[str], probs: np.ndarray, offset: int = 0) -> list[dict]:
    rows = []
    ir = {t: (h, m) for t, h, m in plan.ir_reroutes}
    fr: dict[int, list[int]] = {}
    for t, e, _ in plan.fr_fills:
        fr.setdefault(t, []).append(e)
    unresolved = dict(plan.dropped)
    for t in range(plan.n_tokens):
        missing = plan.top_k - len(plan.routed[t])
        rows.append(
            {
                "step": step,
                "token": offset + t,
                "aspect": aspects[t],
                "routed": ";".join(f"{e}:{r}" for e, r in plan.routed[t]),
                "drops": missing,
                "ir_target": ir[t][0] if t in ir else "",
                "fr_fills": ";".join(str(e) for e in fr.get(t, [])),
                "unresolved": unresolved.get(t, 0),
                "gate_probs": ";".join(repr(float(p)) for p in probs[t]),
            }
        )
    return rows


def train_absa(split: DatasetSplit, config: StageConfig, provider: EmbeddingProvider, spelling: SpellingTable | None = None) -> TrainResult:
    if config.stage != "absa":
        raise UsageError("train_absa needs an absa StageConfig")
    train = expand_triples(split.train)
    val = expand_triples(split.validation)
    if not train:
        raise UsageError("no (review, aspect, sentiment) triples to train on")
    feats = Featurizer(provider, spelling)
    rng = np.random.default_rng(config.seed)
    model = ABSAModel(feats.dim, config, rng, _provider_info(provider))
    X = feats.matrix([t.record for t in train])
    A = feats.aspects([t.aspect for t in train])
    aspects = [t.aspect for t in train]
    y = np.array([SENTIMENTS.index(t.sentiment) for t in train])
    Y = one_hot(y, 3)
    cw = _class_weight_matrix(y, 3) if config.class_weighting else None
    params = model.parameters()
    weights = config.loss_weights
    dynamic = config.routing == "dynamic"
    traces: list[dict] = []

    def loss_fn(idx, step):
        asp = [aspects[i] for i in idx]
        out = model.forward(X[idx], A[idx], asp, train=True, rng=rng)
        target = Y[idx] * cw if cw is not None else Y[idx]
        ce = cce(ad.softmax_rows(out.logits), target)
        aux = mse = None
        if dynamic:
            u = ad.mean_rows(out.scores.probs)
            if weights.enable_aux:
                aux = aux_importance(u, weights.lambda_aux)
            if weights.enable_mse:
                mse = mse_uniform(u, weights.lambda_mse)
        if config.trace:
            traces.extend(trace_rows(step, out.plan, asp, out.scores.g, offset=0))
        return total_loss(ce, aux, mse, weights)

    last_eval: list[EvalResult] = []

    def on_epoch(epoch):
        if not val:
            return {}
        ev = evaluate(model, split.validation, provider, spelling=spelling, featurizer=feats)
        last_eval[:] = [ev]
        return {"val_weighted_f1": ev.report.weighted["f1"], "val_report": ev.report.to_dict(), "cov2": ev.cov2}

    history, last = _adam_loop(model, params, lambda r: _batches(len(train), config.batch_size, r), loss_fn, config, rng, on_epoch)
    ev = last_eval[0] if last_eval else evaluate(model, split.train, provider, spelling=spelling, featurizer=feats)
    return TrainResult(model, history, ev.report, last, rng, heatmap=ev.heatmap, traces=traces, cov2=ev.cov2)


def train_stage(split: DatasetSplit, config: StageConfig, provider: EmbeddingProvider, spelling: SpellingTable | None = None) -> TrainResult:
    fn = {"sentiment": train_sentiment, "acd": train_acd, "absa": train_absa}[config.stage]
    return fn(split, config, provider, spelling)


# --- pseudo-labeling ----------------------------------------------------------------

def pseudo_label(
    model: LinearModel,
    unlabeled: Sequence[ReviewRecord],
    provider: EmbeddingProvider,
    threshold: float = 0.9,
    manual_budget: int = 1800,
    spelling: SpellingTable | None = None,
) -> tuple[list[ReviewRecord], list[ReviewRecord]]:
    """Split confident predictions into (auto_labeled, flagged_for_review).

    The ``manual_budget`` most confident go to review, the rest are labeled
    automatically; both come back in descending confidence with the
    predicted overall sentiment filled in.
    """
    if not 0.5 < threshold <= 1.0:
        raise UsageError("threshold must lie in (0.5, 1]")
    if model.stage != "sentiment":
        raise UsageError("pseudo-labeling needs a sentiment model")
    if not unlabeled:
        return [], []
    feats = Featurizer(provider, spelling)
    probs = model.predict_proba(feats.matrix(unlabeled))
    conf = probs.max(axis=1)
    label = probs.argmax(axis=1)
    keep = [i for i in np.argsort(-conf, kind="stable") if conf[i] >= threshold]
    labeled = [replace(unlabeled[i], overall_sentiment=SENTIMENTS[label[i]]) for i in keep]
    return labeled[manual_budget:], labeled[:manual_budget]


# --- evaluation -------------------------------------------------------------------

def _eval_batches(fn, n: int, batch_size: int) -> list:
    chunks = _batches(n, batch_size, None)
    workers = _threads()
    if workers == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def evaluate(
    model: Model,
    records: Sequence[ReviewRecord],
    provider: EmbeddingProvider,
    spelling: SpellingTable | None = None,
    featurizer: Featurizer | None = None,
    batch_size: int | None = None,
) -> EvalResult:
    """Noiseless evaluation. For the MoE head, COV² is reported over the
    first ten batches and over all batches, for soft and hard utilization."""
    feats = featurizer or Featurizer(provider, spelling)
    bs = batch_size or model.config.batch_size
    if model.stage == "sentiment":
        recs = [r for r in records if r.overall_sentiment is not None]
        if not recs:
            raise UsageError("no labeled records to evaluate")
        X = feats.matrix(recs)
        probs = np.vstack(_eval_batches(lambda idx: model.predict_proba(X[idx]), len(recs), bs))
        truth = np.array([SENTIMENTS.index(r.overall_sentiment) for r in recs])
        preds = [SENTIMENTS[k] for k in probs.argmax(axis=1)]
        report = classification_report(preds, [SENTIMENTS[k] for k in truth], SENTIMENTS)
        return EvalResult(report, pr_curves(probs, truth, SENTIMENTS), None, None, probs, truth)
    if model.stage == "acd":
        recs = [r for r in records if r.aspects or not model.config.drop_empty]
        if not recs:
            raise UsageError("no records to evaluate")
        X = feats.matrix(recs)
        probs = np.vstack(_eval_batches(lambda idx: model.predict_proba(X[idx]), len(recs), bs))
        truth = acd_targets(recs)
        report = multilabel_report(probs >= model.config.acd_threshold, truth, ASPECTS)
        return EvalResult(report, pr_curves(probs, truth, ASPECTS), None, None, probs, truth)

    triples = expand_triples(records)
    if not triples:
        raise UsageError("no (review, aspect, sentiment) triples to evaluate")
    X = feats.matrix([t.record for t in triples])
    A = feats.aspects([t.aspect for t in triples])
    aspects = [t.aspect for t in triples]

    def run(idx):
        probs, out = model.predict(X[idx], A[idx], [aspects[i] for i in idx])
        return probs, out.scores.g.copy(), out.plan

    parts = _eval_batches(run, len(triples), bs)
    probs = np.vstack([p for p, _, _ in parts])
    gate = np.vstack([g for _, g, _ in parts])
    plans = [pl for _, _, pl in parts]
    truth = np.array([SENTIMENTS.index(t.sentiment) for t in triples])
    preds = [SENTIMENTS[k] for k in probs.argmax(axis=1)]
    report = classification_report(preds, [SENTIMENTS[k] for k in truth], SENTIMENTS)
    window = min(COV2_WINDOW, len(plans))
    n_window = sum(p.n_tokens for p in plans[:window])
    cov = {
        "soft": cov2(gate.mean(axis=0)),
        "hard": cov2(_hard_u(plans)),
        "soft_10": cov2(gate[:n_window].mean(axis=0)),
        "hard_10": cov2(_hard_u(plans[:window])),
    }
    return EvalResult(report, pr_curves(probs, truth, SENTIMENTS), cov, gate_heatmap(gate, aspects, model.config.gate.n_experts), probs, truth)


def _hard_u(plans: Sequence[RoutingPlan]) -> np.ndarray:
    counts = np.sum([p.occupancy() for p in plans], axis=0).astype(float)
    return counts / counts.sum()


def gate_heatmap(gate_probs: np.ndarray, aspects: Sequence[str], n_experts: int) -> np.ndarray:
    """E x 6 mean gate probability per (expert, aspect); absent aspects give 0."""
    out = np.zeros((n_experts, len(ASPECTS)))
    aspects = np.asarray(aspects)
    for k, a in enumerate(ASPECTS):
        mask = aspects == a
        if mask.any():
            out[:, k] = gate_probs[mask].mean(axis=0)
    return out
