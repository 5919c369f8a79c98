"""Synthetic super-domain / sub-domain impression logs.

Labels come from a shared latent-factor model: both domains draw the same
per-user latent interest vector, so representations learned on the dense
super-domain log provably carry signal for the sparse sub-domain log. The
click logit for user u on item i of category c is

    s = <z_u, q_i> + <z_u, t_c> + a_i + b_c + b0

with z_u drifting a little every day (distribution shift), a_i a per-item
quality bias, b_c a category bias and b0 the base-rate offset. The user
interest terms (everything involving z_u) are identical in both domains;
the presentation-side terms are domain-specific: the sub-domain adds a
per-category bias shift and uses item biases only partially correlated
with the super-domain's (sub_item_bias_corr). Naive sample merging of
the two logs is therefore mis-calibrated for the sub-domain, while
user-interest knowledge transfers cleanly. Conversion and add-to-cart
are sampled only on clicked impressions, with a reduced latent term.

Behavior sequences hold the user's last clicked item ids and refresh at
day boundaries (an impression on day d sees the history up to day d-1),
mirroring daily feature snapshots. A session is a contiguous run of at
most `session_max_len` impressions of one user within one day.

Logs are line-delimited JSON, one record per line, fixed field order.
Generation is single-threaded and byte-deterministic for a fixed seed; a
columnar .npz cache is written next to each log for fast reloading.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

RECORD_FIELDS = ("domain", "day", "session_id", "user_id", "item_id", "shop_id",
                 "category_id", "behavior_seq", "click", "conversion", "cart")


class ConfigError(ValueError):
    pass


@dataclass
class ImpressionRecord:
    domain: str
    day: int
    session_id: int
    user_id: int
    item_id: int
    shop_id: int
    category_id: int
    behavior_seq: tuple[int, ...]
    click: int
    conversion: int
    cart: int

    def validate(self) -> None:
        if self.conversion and not self.click:
            raise ValueError("conversion=1 requires click=1")
        if self.cart and not self.click:
            raise ValueError("cart=1 requires click=1")

    def to_json_line(self) -> str:
        d = {k: getattr(self, k) for k in RECORD_FIELDS}
        d["behavior_seq"] = list(self.behavior_seq)
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json_line(cls, line: str) -> "ImpressionRecord":
        d = json.loads(line)
        d["behavior_seq"] = tuple(d["behavior_seq"])
        return cls(**d)


@dataclass
class GeneratorConfig:
    n_users: int = 10_000
    n_items: int = 2_000
    n_categories: int = 50
    n_shops: int = 200
    n_days: int = 8
    super_impressions_per_user_day: float = 12.5
    sub_impressions_per_user_day: float = 0.5
    latent_dim: int = 4
    drift_rate: float = 0.02
    base_click_rate: float = 0.18
    conversion_given_click: float = 0.12
    cart_given_click: float = 0.15
    behavior_window: int = 20
    session_max_len: int = 10
    sub_item_fraction: float = 0.5
    sub_category_bias_shift: float = 0.8
    sub_item_bias_corr: float = 0.7
    affinity_scale: float = 2.0
    category_affinity_scale: float = 1.2
    item_bias_scale: float = 0.5
    category_bias_scale: float = 0.3
    seed: int = 20240811

    def validate(self) -> None:
        if self.n_users <= 0 or self.n_items <= 0:
            raise ConfigError("n_users and n_items must be positive")
        if self.n_categories <= 0 or self.n_shops <= 0 or self.n_days <= 0:
            raise ConfigError("n_categories, n_shops and n_days must be positive")
        if not self.sub_impressions_per_user_day < self.super_impressions_per_user_day:
            raise ConfigError("sub-domain rate must be below the super-domain rate")
        if not 0.0 < self.base_click_rate < 1.0:
            raise ConfigError("base_click_rate must lie in (0, 1)")
        # zero is legal for the click-conditioned rates (disables the behavior)
        for name in ("conversion_given_click", "cart_given_click"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not 0.0 < self.sub_item_fraction <= 1.0:
            raise ConfigError("sub_item_fraction must lie in (0, 1]")
        if not 0.0 <= self.sub_item_bias_corr <= 1.0:
            raise ConfigError("sub_item_bias_corr must lie in [0, 1]")


@dataclass
class Catalog:
    """Static item metadata shared by generator and models."""

    item_shop: np.ndarray
    item_category: np.ndarray
    sub_items: np.ndarray

    def save(self, path: Path) -> None:
        np.savez(path, item_shop=self.item_shop, item_category=self.item_category,
                 sub_items=self.sub_items)

    @classmethod
    def load(cls, path: Path) -> "Catalog":
        z = np.load(path)
        return cls(item_shop=z["item_shop"], item_category=z["item_category"],
                   sub_items=z["sub_items"])


@dataclass
class RecordBatch:
    """Columnar view of impression records; the shape all training code
    consumes. behavior is right-padded with -1."""

    day: np.ndarray
    session_id: np.ndarray
    user_id: np.ndarray
    item_id: np.ndarray
    shop_id: np.ndarray
    category_id: np.ndarray
    behavior: np.ndarray
    behavior_len: np.ndarray
    click: np.ndarray
    conversion: np.ndarray
    cart: np.ndarray

    def __len__(self) -> int:
        return len(self.user_id)

    def take(self, idx: np.ndarray) -> "RecordBatch":
        return RecordBatch(**{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})

    @classmethod
    def concat(cls, parts: Sequence["RecordBatch"]) -> "RecordBatch":
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts])
                      for k in cls.__dataclass_fields__})

    @classmethod
    def from_records(cls, records: Sequence[ImpressionRecord], window: int) -> "RecordBatch":
        n = len(records)
        behavior = np.full((n, window), -1, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int32)
        for k, r in enumerate(records):
            seq = r.behavior_seq[-window:]
            behavior[k, :len(seq)] = seq
            lengths[k] = len(seq)
        col = lambda name, dt: np.array([getattr(r, name) for r in records], dtype=dt)
        return cls(day=col("day", np.int32), session_id=col("session_id", np.int64),
                   user_id=col("user_id", np.int64), item_id=col("item_id", np.int64),
                   shop_id=col("shop_id", np.int64), category_id=col("category_id", np.int64),
                   behavior=behavior, behavior_len=lengths,
                   click=col("click", np.int8), conversion=col("conversion", np.int8),
                   cart=col("cart", np.int8))

    def record(self, k: int, domain: str = "") -> ImpressionRecord:
        seq = tuple(int(x) for x in self.behavior[k, :self.behavior_len[k]])
        return ImpressionRecord(domain=domain, day=int(self.day[k]),
                                session_id=int(self.session_id[k]),
                                user_id=int(self.user_id[k]), item_id=int(self.item_id[k]),
                                shop_id=int(self.shop_id[k]),
                                category_id=int(self.category_id[k]),
                                behavior_seq=seq, click=int(self.click[k]),
                                conversion=int(self.conversion[k]), cart=int(self.cart[k]))


def _latent(rng: np.random.Generator, n: int, k: int, scale: float) -> np.ndarray:
    # entries sized so std(<a, b>) over two such draws equals `scale`
    entry = np.sqrt(scale / np.sqrt(k))
    return rng.normal(0.0, entry, size=(n, k))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _given_click_prob(base: float, latent: np.ndarray) -> np.ndarray:
    if base <= 0.0:
        return np.zeros_like(latent)
    return _sigmoid(np.log(base / (1.0 - base)) + 0.5 * latent)


class _History:
    """Per-user rolling click history, refreshed at day boundaries."""

    def __init__(self, n_users: int, window: int):
        self.window = window
        self.seqs: list[list[int]] = [[] for _ in range(n_users)]

    def snapshot(self, users: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = len(users)
        out = np.full((n, self.window), -1, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int32)
        for row, u in enumerate(users):
            seq = self.seqs[u]
            lengths[row] = len(seq)
            if seq:
                out[row, :len(seq)] = seq
        return out, lengths

    def append_clicks(self, users: np.ndarray, items: np.ndarray) -> None:
        for u, i in zip(users.tolist(), items.tolist()):
            seq = self.seqs[u]
            seq.append(i)
            if len(seq) > self.window:
                del seq[0]


def _day_block(rng, cfg: GeneratorConfig, day: int, domain: str,
               users_pool_rate: float, item_pool: np.ndarray, item_probs: np.ndarray,
               z, q, t, a_item, b_cat, b0, shift_cat, item_cat, item_shop,
               hist: _History, session_counter: int) -> tuple[dict, int]:
    counts = rng.poisson(users_pool_rate, cfg.n_users)
    users = np.repeat(np.arange(cfg.n_users, dtype=np.int64), counts)
    n = len(users)
    items = item_pool[rng.choice(len(item_pool), size=n, p=item_probs)]
    cats = item_cat[items]
    zq = np.einsum("nk,nk->n", z[users], q[items])
    logit = (zq + np.einsum("nk,nk->n", z[users], t[cats])
             + a_item[items] + b_cat[cats] + b0)
    if domain == "sub":
        logit = logit + shift_cat[cats]
    p_click = _sigmoid(logit)
    click = rng.random(n) < p_click
    conversion = click & (rng.random(n) < _given_click_prob(cfg.conversion_given_click, zq))
    cart = click & (rng.random(n) < _given_click_prob(cfg.cart_given_click, zq))

    # contiguous per-user runs of <= session_max_len impressions form a session
    starts = np.zeros(cfg.n_users + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    local = np.arange(n, dtype=np.int64) - np.repeat(starts[:-1], counts)
    sess_local = local // cfg.session_max_len
    sess_per_user = -(-counts // cfg.session_max_len)  # ceil
    sess_base = np.zeros(cfg.n_users + 1, dtype=np.int64)
    np.cumsum(sess_per_user, out=sess_base[1:])
    session_id = session_counter + np.repeat(sess_base[:-1], counts) + sess_local

    behavior, behavior_len = hist.snapshot(users)
    block = dict(day=np.full(n, day, dtype=np.int32), session_id=session_id,
                 user_id=users, item_id=items, shop_id=item_shop[items],
                 category_id=cats, behavior=behavior, behavior_len=behavior_len,
                 click=click.astype(np.int8), conversion=conversion.astype(np.int8),
                 cart=cart.astype(np.int8), p_click=p_click)
    return block, session_counter + int(sess_base[-1])


def generate(config: GeneratorConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Write super.jsonl and sub.jsonl (plus .npz caches, catalog and meta).

    Returns the two log paths. Byte-identical output for identical config.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    k = config.latent_dim

    z = _latent(rng, config.n_users, k, config.affinity_scale)
    q = _latent(rng, config.n_items, k, config.affinity_scale)
    t = _latent(rng, config.n_categories, k, config.category_affinity_scale)
    a_item = rng.normal(0.0, config.item_bias_scale, config.n_items)
    corr = config.sub_item_bias_corr
    a_item_sub = corr * a_item + np.sqrt(1.0 - corr ** 2) * rng.normal(
        0.0, config.item_bias_scale, config.n_items)
    b_cat = rng.normal(0.0, config.category_bias_scale, config.n_categories)
    shift_cat = rng.normal(0.0, config.sub_category_bias_shift, config.n_categories)
    b0 = float(np.log(config.base_click_rate / (1 - config.base_click_rate)))

    item_cat = rng.integers(0, config.n_categories, config.n_items, dtype=np.int64)
    item_shop = rng.integers(0, config.n_shops, config.n_items, dtype=np.int64)
    n_sub_items = max(1, int(round(config.sub_item_fraction * config.n_items)))
    sub_items = np.sort(rng.choice(config.n_items, size=n_sub_items, replace=False)).astype(np.int64)
    catalog = Catalog(item_shop=item_shop, item_category=item_cat, sub_items=sub_items)

    # mild popularity skew over items, fixed across days
    pop = (np.arange(config.n_items) + 10.0) ** -0.7
    pop = rng.permutation(pop)
    all_items = np.arange(config.n_items, dtype=np.int64)
    super_probs = pop / pop.sum()
    sub_pop = pop[sub_items]
    sub_probs = sub_pop / sub_pop.sum()

    hist = _History(config.n_users, config.behavior_window)
    drift_entry = np.sqrt(config.affinity_scale / np.sqrt(k))
    session_counter = 0
    super_blocks, sub_blocks = [], []
    for day in range(config.n_days):
        if day > 0:
            z = z + config.drift_rate * rng.normal(0.0, drift_entry, size=z.shape)
        blk, session_counter = _day_block(
            rng, config, day, "super", config.super_impressions_per_user_day,
            all_items, super_probs, z, q, t, a_item, b_cat, b0, shift_cat,
            item_cat, item_shop, hist, session_counter)
        super_blocks.append(blk)
        sblk, session_counter = _day_block(
            rng, config, day, "sub", config.sub_impressions_per_user_day,
            sub_items, sub_probs, z, q, t, a_item_sub, b_cat, b0, shift_cat,
            item_cat, item_shop, hist, session_counter)
        sub_blocks.append(sblk)
        for blk_ in (blk, sblk):
            m = blk_["click"].astype(bool)
            hist.append_clicks(blk_["user_id"][m], blk_["item_id"][m])

    stats = {}
    paths = []
    for domain, blocks in (("super", super_blocks), ("sub", sub_blocks)):
        cols = {key: np.concatenate([b[key] for b in blocks])
                for key in blocks[0] if key != "p_click"}
        p_click = np.concatenate([b["p_click"] for b in blocks])
        path = out / f"{domain}.jsonl"
        _write_jsonl(path, domain, cols)
        np.savez(out / f"{domain}.npz", **cols)
        stats[domain] = dict(impressions=int(len(p_click)),
                             clicks=int(cols["click"].sum()),
                             conversions=int(cols["conversion"].sum()),
                             carts=int(cols["cart"].sum()),
                             expected_click_rate=float(p_click.mean()),
                             users=int(len(np.unique(cols["user_id"]))))
        paths.append(path)

    catalog.save(out / "catalog.npz")
    meta = dict(config=asdict(config), stats=stats)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths[0], paths[1]


def _write_jsonl(path: Path, domain: str, cols: dict) -> None:
    n = len(cols["user_id"])
    with open(path, "w") as fh:
        for i in range(n):
            seq = cols["behavior"][i, :cols["behavior_len"][i]]
            d = {"domain": domain, "day": int(cols["day"][i]),
                 "session_id": int(cols["session_id"][i]),
                 "user_id": int(cols["user_id"][i]), "item_id": int(cols["item_id"][i]),
                 "shop_id": int(cols["shop_id"][i]),
                 "category_id": int(cols["category_id"][i]),
                 "behavior_seq": [int(x) for x in seq],
                 "click": int(cols["click"][i]), "conversion": int(cols["conversion"][i]),
                 "cart": int(cols["cart"][i])}
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")


def read_log(path: str | Path) -> list[ImpressionRecord]:
    path = Path(path)
    with open(path) as fh:
        return [ImpressionRecord.from_json_line(line) for line in fh if line.strip()]


def load_log_columnar(path: str | Path, window: int = 20) -> RecordBatch:
    """Load a log as a RecordBatch, preferring the .npz cache if fresh."""
    path = Path(path)
    cache = path.with_suffix(".npz")
    if cache.exists() and cache.stat().st_mtime >= path.stat().st_mtime:
        z = np.load(cache)
        return RecordBatch(**{k: z[k] for k in RecordBatch.__dataclass_fields__})
    return RecordBatch.from_records(read_log(path), window=window)


def day_order(days: np.ndarray, day_range: Sequence[int], seed: int) -> np.ndarray:
    """Single-epoch training order: indices grouped day-ascending, with a
    seeded uniform shuffle inside each day. Warns on a missing day."""
    if len(day_range) == 0:
        raise ConfigError("day_range must be nonempty")
    pieces = []
    for day in sorted(day_range):
        idx = np.flatnonzero(days == day)
        if len(idx) == 0:
            warnings.warn(f"no records for day {day}", stacklevel=2)
            continue
        rng = np.random.default_rng((seed, day))
        pieces.append(idx[rng.permutation(len(idx))])
    if not pieces:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(pieces)


def iterate_training_order(log: Sequence[ImpressionRecord], day_range: Sequence[int],
                           seed: int) -> Iterator[ImpressionRecord]:
    """Stream records day-by-day ascending, shuffled within each day.

    Each record is emitted exactly once (single-epoch contract).
    """
    days = np.array([r.day for r in log], dtype=np.int64)
    for idx in day_order(days, day_range, seed):
        yield log[int(idx)]
