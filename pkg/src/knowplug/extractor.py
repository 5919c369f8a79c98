"""Stage-1 knowledge extraction: shared-bottom multi-task pre-training on
the super-domain log.

One embedding layer (user / item / shop / category / behavior) feeds
DIN-style attention pooling; each task (click, conversion, add-to-cart)
owns a private MLP head whose last layer emits 2 values, differenced into
a scalar logit. Click trains on all impressions; conversion and cart
train on clicked impressions only. Each task optimizes the hybrid
objective: pointwise cross-entropy plus alpha times a pairwise logistic
term over same-session positive/negative triplets.

The exported knowledge for a (user, item) pair is
[k_u ; k_i ; k_ui_clk ; k_ui_cv ; k_ui_cart]: the user-id embedding, the
concatenated item/shop/category embeddings, and each head's second-last
layer output. Task order in the concatenation is fixed; a task the model
was trained without contributes zeros, so the vector length depends only
on the architecture config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint as ckpt
from .datagen import Catalog, ImpressionRecord, RecordBatch, day_order
from .features import SparseFeatureNet, assign_params, batch_features
from .nncore import AdamState, MlpStack, adam_step

TASKS = ("click", "conversion", "cart")


@dataclass
class ExtractorConfig:
    user_vocab: int
    item_vocab: int
    shop_vocab: int
    category_vocab: int
    user_dim: int = 48
    feature_dim: int = 16
    head_dims: tuple[int, ...] = (64, 32, 16, 8, 2)
    att_hidden: int = 8
    tasks: tuple[str, ...] = TASKS
    seed: int = 0

    def validate(self) -> None:
        if self.head_dims[-1] != 2:
            raise ValueError("task heads must end in a 2-dim output layer")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks: {sorted(unknown)}")


@dataclass
class PretrainConfig:
    alpha: float = 0.25
    batch_size: int = 2000
    lr: float = 0.001
    triplet_cap: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size <= 0 or self.triplet_cap < 0:
            raise ValueError("batch_size must be positive, triplet_cap >= 0")


class ExtractorModel:
    def __init__(self, cfg: ExtractorConfig, catalog: Catalog | None = None):
        cfg.validate()
        self.cfg = cfg
        self.catalog = catalog
        rng = np.random.default_rng(cfg.seed)
        vocabs = {"user": cfg.user_vocab, "item": cfg.item_vocab,
                  "shop": cfg.shop_vocab, "category": cfg.category_vocab}
        self.encoder = SparseFeatureNet(
            vocabs, rng, include=("user", "item", "shop", "category"),
            user_dim=cfg.user_dim, feature_dim=cfg.feature_dim,
            pool="attention", pool_target="item", att_hidden=cfg.att_hidden)
        dims = [self.encoder.out_dim, *cfg.head_dims]
        self.heads = {task: MlpStack.build(dims, rng) for task in cfg.tasks}

    def walk_slots(self):
        yield from self.encoder.walk_slots()
        for task, head in self.heads.items():
            for i, layer in enumerate(head.layers):
                yield f"head_{task}_l{i}_w", layer, "weight"
                yield f"head_{task}_l{i}_b", layer, "bias"

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(obj, attr) for name, obj, attr in self.walk_slots()}

    def _head(self, task: str) -> MlpStack:
        try:
            return self.heads[task]
        except KeyError:
            raise ValueError(f"unknown task '{task}'") from None

    def score_batch(self, batch: RecordBatch, task: str) -> tuple[np.ndarray, dict]:
        x, enc_cache = self.encoder.forward(batch_features(batch))
        out, trace = self._head(task).forward(x)
        logits = out[:, 0] - out[:, 1]
        return logits, {"x": x, "enc": enc_cache, "trace": trace, "task": task}

    def backward_batch(self, cache: dict, dlogit: np.ndarray,
                       grads: dict[str, np.ndarray]) -> None:
        task = cache["task"]
        dout = np.stack([dlogit, -dlogit], axis=1)
        head_grads, dx = self._head(task).backward(cache["x"], cache["trace"], dout)
        for i, (dw, db) in enumerate(head_grads):
            _acc(grads, f"head_{task}_l{i}_w", dw)
            _acc(grads, f"head_{task}_l{i}_b", db)
        self.encoder.backward(cache["enc"], dx, grads)

    # -- persistence ---------------------------------------------------

    def save(self, path, optimizer: AdamState | None = None,
             extra: dict | None = None) -> None:
        tensors = dict(self.params())
        meta = dict(extra or {})
        if optimizer is not None:
            tensors.update(ckpt.optimizer_tensors(optimizer))
            meta["adam_step"] = optimizer.step
            meta["adam_lr"] = optimizer.lr
        ckpt.save_checkpoint(path, "extractor", _config_dict(self.cfg), tensors, meta)

    @classmethod
    def load(cls, path, catalog: Catalog | None = None
             ) -> tuple["ExtractorModel", AdamState | None, dict]:
        kind, config, tensors, extra = ckpt.load_checkpoint(path)
        if kind != "extractor":
            raise ckpt.CheckpointError(f"{path}: expected an extractor checkpoint, got '{kind}'")
        config["head_dims"] = tuple(config["head_dims"])
        config["tasks"] = tuple(config["tasks"])
        model = cls(ExtractorConfig(**config), catalog=catalog)
        params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        assign_params(model.walk_slots(), params)
        opt = None
        if "adam_step" in extra:
            opt = AdamState(lr=float(extra["adam_lr"]))
            ckpt.restore_optimizer(opt, tensors, extra)
        return model, opt, extra


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _acc(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def score(model: ExtractorModel, record: ImpressionRecord, task: str) -> float:
    """Scalar logit s for one impression under one task head."""
    batch = RecordBatch.from_records([record], window=max(len(record.behavior_seq), 1))
    logits, _ = model.score_batch(batch, task)
    return float(logits[0])


# ---------------------------------------------------------------------------
# losses


def pointwise_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Summed binary cross-entropy between sigmoid(logit) and the label,
    accumulated in float64 with the probability clamped to
    [1e-7, 1 - 1e-7]."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != np.shape(logits):
        raise ValueError("logits and labels must have equal length")
    if np.any((labels != 0.0) & (labels != 1.0)):
        raise ValueError("labels must be binary")
    s = np.asarray(logits, dtype=np.float64)
    p = np.clip(1.0 / (1.0 + np.exp(-s)), 1e-7, 1.0 - 1e-7)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).sum())


def pointwise_loss_grad(logits: np.ndarray, labels: np.ndarray
                        ) -> tuple[float, np.ndarray]:
    loss = pointwise_loss(logits, labels)
    s = np.asarray(logits, dtype=np.float64)
    d = 1.0 / (1.0 + np.exp(-s)) - np.asarray(labels, dtype=np.float64)
    return loss, d


def pairwise_loss(pos_logits: np.ndarray, neg_logits: np.ndarray) -> float:
    """Summed pairwise logistic loss over triplets: log(1 + exp(-(s_pos -
    s_neg))), in the numerically stable logaddexp form."""
    pos = np.asarray(pos_logits, dtype=np.float64)
    neg = np.asarray(neg_logits, dtype=np.float64)
    return float(np.logaddexp(0.0, -(pos - neg)).sum())


def pairwise_loss_grad(pos_logits: np.ndarray, neg_logits: np.ndarray
                       ) -> tuple[float, np.ndarray, np.ndarray]:
    loss = pairwise_loss(pos_logits, neg_logits)
    diff = (np.asarray(pos_logits, dtype=np.float64)
            - np.asarray(neg_logits, dtype=np.float64))
    dneg = 1.0 / (1.0 + np.exp(diff))
    return loss, -dneg, dneg


def hybrid_loss(point: float, pair: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return point + alpha * pair


# ---------------------------------------------------------------------------
# triplets


@dataclass
class TripletBatch:
    """Positive/negative index pairs into one record collection; entry k
    pairs a positive and a negative impression of the same user session."""

    pos_idx: np.ndarray
    neg_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.pos_idx)


def build_triplets(records, cap: int, rng: np.random.Generator,
                   label: str = "click") -> TripletBatch:
    """Pair each positive in one user session with up to `cap` negatives
    sampled without replacement. Sessions lacking a positive or a negative
    yield an empty batch."""
    if isinstance(records, RecordBatch):
        batch = records
    else:
        batch = RecordBatch.from_records(list(records), window=1)
    if len(batch) and (len(np.unique(batch.user_id)) > 1
                       or len(np.unique(batch.session_id)) > 1):
        raise ValueError("triplets are built within a single user session")
    labels = getattr(batch, label)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    return _pair(pos, neg, cap, rng)


def _pair(pos: np.ndarray, neg: np.ndarray, cap: int,
          rng: np.random.Generator) -> TripletBatch:
    if len(pos) == 0 or len(neg) == 0 or cap == 0:
        empty = np.empty(0, dtype=np.int64)
        return TripletBatch(empty, empty)
    pos_out, neg_out = [], []
    take = min(cap, len(neg))
    for p in pos:
        chosen = rng.choice(neg, size=take, replace=False) if take < len(neg) else neg
        pos_out.append(np.full(len(chosen), p, dtype=np.int64))
        neg_out.append(np.asarray(chosen, dtype=np.int64))
    return TripletBatch(np.concatenate(pos_out), np.concatenate(neg_out))


def day_triplets(batch: RecordBatch, label: str, cap: int,
                 seed) -> TripletBatch:
    """Build and shuffle triplets for every session in a day's records."""
    rng = np.random.default_rng(seed)
    labels = getattr(batch, label)
    order = np.argsort(batch.session_id, kind="stable")
    sess = batch.session_id[order]
    bounds = np.flatnonzero(np.diff(sess)) + 1
    pos_all, neg_all = [], []
    for grp in np.split(order, bounds):
        lab = labels[grp]
        t = _pair(np.flatnonzero(lab == 1), np.flatnonzero(lab == 0), cap, rng)
        if len(t):
            pos_all.append(grp[t.pos_idx])
            neg_all.append(grp[t.neg_idx])
    if not pos_all:
        empty = np.empty(0, dtype=np.int64)
        return TripletBatch(empty, empty)
    pos = np.concatenate(pos_all)
    neg = np.concatenate(neg_all)
    perm = rng.permutation(len(pos))
    return TripletBatch(pos[perm], neg[perm])


# ---------------------------------------------------------------------------
# training


@dataclass
class TaskLoss:
    point: float = 0.0
    pair: float = 0.0
    hybrid: float = 0.0
    n: int = 0
    n_triplets: int = 0


def joint_loss_and_grads(model: ExtractorModel, impression_batch: RecordBatch,
                         click_batch: RecordBatch, config: PretrainConfig,
                         triplets: dict[str, tuple[RecordBatch, RecordBatch]] | None = None
                         ) -> tuple[dict[str, TaskLoss], dict[str, np.ndarray]]:
    """Joint pre-training loss (sum over tasks of pointwise + alpha *
    pairwise) and its analytic gradients. Shared embeddings accumulate
    gradients from every task; `triplets` holds per-task positive/negative
    member records for the pairwise terms."""
    grads: dict[str, np.ndarray] = {}
    losses: dict[str, TaskLoss] = {}
    for task in model.cfg.tasks:
        base = impression_batch if task == "click" else click_batch
        trip = (triplets or {}).get(task)
        n_base = len(base)
        n_trip = len(trip[0]) if trip is not None else 0
        if n_base == 0 and n_trip == 0:
            losses[task] = TaskLoss()
            continue
        parts = [base] if n_base else []
        if n_trip:
            parts.extend([trip[0], trip[1]])
        full = parts[0] if len(parts) == 1 else RecordBatch.concat(parts)
        logits, cache = model.score_batch(full, task)
        s_base = logits[:n_base]
        point, dpoint = (0.0, np.empty(0)) if n_base == 0 else \
            pointwise_loss_grad(s_base, getattr(base, task))
        if n_trip:
            s_pos = logits[n_base:n_base + n_trip]
            s_neg = logits[n_base + n_trip:]
            pair, dpos, dneg = pairwise_loss_grad(s_pos, s_neg)
            dlogit = np.concatenate([dpoint, config.alpha * dpos,
                                     config.alpha * dneg])
        else:
            pair = 0.0
            dlogit = dpoint
        model.backward_batch(cache, dlogit.astype(logits.dtype), grads)
        losses[task] = TaskLoss(point=point, pair=pair,
                                hybrid=hybrid_loss(point, pair, config.alpha),
                                n=n_base, n_triplets=n_trip)
    return losses, grads


def joint_loss(model: ExtractorModel, impression_batch: RecordBatch,
               click_batch: RecordBatch, config: PretrainConfig,
               triplets=None) -> float:
    losses, _ = joint_loss_and_grads(model, impression_batch, click_batch,
                                     config, triplets)
    return sum(tl.hybrid for tl in losses.values())


def pretrain_step(model: ExtractorModel, optimizer: AdamState,
                  impression_batch: RecordBatch, click_batch: RecordBatch,
                  config: PretrainConfig,
                  triplets: dict[str, tuple[RecordBatch, RecordBatch]] | None = None
                  ) -> dict[str, TaskLoss]:
    """One Adam step on the joint loss over all model parameters."""
    losses, grads = joint_loss_and_grads(model, impression_batch, click_batch,
                                         config, triplets)
    params = model.params()
    full_grads = {k: grads[k] if k in grads else np.zeros_like(v)
                  for k, v in params.items()}
    adam_step(optimizer, params, full_grads)
    return losses


def pretrain(model: ExtractorModel, optimizer: AdamState, log: RecordBatch,
             days, config: PretrainConfig, checkpoint_path=None,
             start_after_day: int | None = None, log_fn=None) -> list[dict]:
    """Single-epoch pre-training: days ascending, seeded shuffle within
    each day. With `checkpoint_path` the model is saved after every day
    (cursor recorded), so a run can resume after `start_after_day` and
    reproduce the uninterrupted run exactly."""
    config.validate()
    history = []
    for day in sorted(days):
        if start_after_day is not None and day <= start_after_day:
            continue
        order = day_order(log.day, [day], config.seed)
        day_batch = log.take(order)
        clicked = day_batch.take(np.flatnonzero(day_batch.click == 1))
        trips: dict[str, TripletBatch] = {}
        sources: dict[str, RecordBatch] = {}
        for ti, task in enumerate(model.cfg.tasks):
            src = day_batch if task == "click" else clicked
            trips[task] = day_triplets(src, task, config.triplet_cap,
                                       (config.seed, day, ti))
            sources[task] = src
        n = len(day_batch)
        steps = max(1, math.ceil(n / config.batch_size))
        day_losses = {t: TaskLoss() for t in model.cfg.tasks}
        for s in range(steps):
            imp = day_batch.take(np.arange(s * config.batch_size,
                                           min(n, (s + 1) * config.batch_size)))
            clk = imp.take(np.flatnonzero(imp.click == 1))
            step_trips = {}
            for task in model.cfg.tasks:
                t = trips[task]
                lo = round(s * len(t) / steps)
                hi = round((s + 1) * len(t) / steps)
                if hi > lo:
                    src = sources[task]
                    step_trips[task] = (src.take(t.pos_idx[lo:hi]),
                                        src.take(t.neg_idx[lo:hi]))
            losses = pretrain_step(model, optimizer, imp, clk, config, step_trips)
            for task, tl in losses.items():
                agg = day_losses[task]
                agg.point += tl.point
                agg.pair += tl.pair
                agg.hybrid += tl.hybrid
                agg.n += tl.n
                agg.n_triplets += tl.n_triplets
        history.append({"day": day, **{t: vars(v) for t, v in day_losses.items()}})
        if log_fn:
            clk_loss = day_losses["click"]
            log_fn(f"day {day}: click point/sample="
                   f"{clk_loss.point / max(clk_loss.n, 1):.4f} "
                   f"({clk_loss.n} impressions, {clk_loss.n_triplets} triplets)")
        if checkpoint_path:
            model.save(checkpoint_path, optimizer, extra={"cursor_day": day})
    return history


# ---------------------------------------------------------------------------
# knowledge export


@dataclass
class KnowledgeVector:
    """Extracted knowledge for one (user, item) pair, fixed slot order."""

    k_u: np.ndarray
    k_i: np.ndarray
    k_ui_clk: np.ndarray
    k_ui_cv: np.ndarray
    k_ui_cart: np.ndarray

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.k_u, self.k_i, self.k_ui_clk,
                               self.k_ui_cv, self.k_ui_cart])


def knowledge_dim(cfg: ExtractorConfig) -> int:
    return cfg.user_dim + 3 * cfg.feature_dim + len(TASKS) * cfg.head_dims[-2]


def knowledge_slices(cfg: ExtractorConfig) -> dict[str, slice]:
    """Segment layout of the concatenated knowledge vector."""
    d_ui = cfg.head_dims[-2]
    u, i = cfg.user_dim, 3 * cfg.feature_dim
    out = {"k_u": slice(0, u), "k_i": slice(u, u + i)}
    off = u + i
    for task in TASKS:
        out[f"k_ui_{task}"] = slice(off, off + d_ui)
        off += d_ui
    return out


def extract_knowledge_batch(model: ExtractorModel, batch: RecordBatch) -> np.ndarray:
    """Knowledge matrix (n, knowledge_dim) for a batch of impressions.

    k_u and k_i are embedding rows (task independent); each task slot is
    that head's second-last layer output, zeros for untrained tasks.
    """
    cfg = model.cfg
    x, _ = model.encoder.forward(batch_features(batch))
    n = len(batch)
    parts = [x[:, :cfg.user_dim + 3 * cfg.feature_dim]]
    for task in TASKS:
        if task in model.heads:
            _, trace = model.heads[task].forward(x)
            parts.append(trace[-2])
        else:
            parts.append(np.zeros((n, cfg.head_dims[-2]), dtype=x.dtype))
    return np.concatenate(parts, axis=1)


def extract_knowledge(model: ExtractorModel, u: int, i: int,
                      shop_id: int | None = None, category_id: int | None = None,
                      behavior_seq: tuple[int, ...] = ()) -> KnowledgeVector:
    """Knowledge for one (user, item) pair; shop/category default to the
    model's catalog entry for the item."""
    if shop_id is None or category_id is None:
        if model.catalog is None:
            raise ValueError("no catalog attached: pass shop_id and category_id")
        shop_id = int(model.catalog.item_shop[i]) if shop_id is None else shop_id
        category_id = (int(model.catalog.item_category[i])
                       if category_id is None else category_id)
    rec = ImpressionRecord(domain="super", day=0, session_id=0, user_id=u,
                           item_id=i, shop_id=shop_id, category_id=category_id,
                           behavior_seq=tuple(behavior_seq), click=0,
                           conversion=0, cart=0)
    batch = RecordBatch.from_records([rec], window=max(len(rec.behavior_seq), 1))
    row = extract_knowledge_batch(model, batch)[0]
    sl = knowledge_slices(model.cfg)
    return KnowledgeVector(k_u=row[sl["k_u"]], k_i=row[sl["k_i"]],
                           k_ui_clk=row[sl["k_ui_click"]],
                           k_ui_cv=row[sl["k_ui_conversion"]],
                           k_ui_cart=row[sl["k_ui_cart"]])
