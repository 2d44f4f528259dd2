"""Model assembly, composite objective, Adam and the training loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .adapter import Affine, ExpertBank, MoEAdapter, adapt_batch, adapter_balance_loss
from .data import Dataset, TripletBatch, TripletSampler, epoch_batches, substream
from .errors import (CheckpointMismatch, ConfigError, DataError, DivergenceError,
                     IntegrityError, NumericError, ShapeError)
from .fusion import (FusionGate, alignment_loss_batch, fuse_batch, fuse_uniform_batch,
                     fusion_balance_loss)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_moe", "no_align", "no_mmf", "joint_router", "mod_specific_router")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    num_experts: int = 4
    top_k: int = 2
    lambda1: float = 0.1   # alignment
    lambda2: float = 0.01  # adapter balance
    lambda3: float = 0.01  # fusion balance
    lambda4: float = 0.01  # L2 on all parameters
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    variant: str = "full"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_std: float = 0.01
    expert_bias: bool = True
    # "mean" divides the batch-summed BPR and alignment terms by their row counts
    reduction: str = "mean"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d < 1 or self.num_experts < 1:
            raise ConfigError("d and num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in [1, num_experts={self.num_experts}], got {self.top_k}")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need lr > 0, batch_size >= 1, epochs >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    def effective(self) -> "ModelConfig":
        """Config with variant-implied overrides applied (no_align zeroes lambda1)."""
        return replace(self, lambda1=0.0) if self.variant == "no_align" else self

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, kinds[key], raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _parse_value(key, kind, raw):
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


# ---------------------------------------------------------------------------
# model


@dataclass
class ItemForward:
    e: nx.Var
    alpha: nx.Var
    routing: list
    align: nx.Var
    adapter: nx.Var
    fusion: nx.Var


class MamexModel:
    """User embedding table plus the item tower (adapters + fusion)."""

    def __init__(self, config: ModelConfig, n_users: int, modalities, in_dims, rng=None):
        self.config = config
        self.modalities = list(modalities)
        self.in_dims = [int(x) for x in in_dims]
        self.n_users = int(n_users)
        rng = rng if rng is not None else substream(config.seed, "init")
        c, std = config, config.init_std
        self.user_emb = nx.Parameter(rng.normal(0.0, std, size=(n_users, c.d)), "user_emb")
        self.adapters: list = []
        self.joint: MoEAdapter | None = None
        self.fusion: FusionGate | None = None
        if c.variant == "joint_router":
            self.joint = MoEAdapter.init("joint", sum(self.in_dims), c.d, c.num_experts, c.top_k,
                                         rng, std, c.expert_bias)
        elif c.variant == "no_moe":
            self.adapters = [Affine.init(f"adapter.{m}.linear", n, c.d, rng, std, c.expert_bias)
                             for m, n in zip(self.modalities, self.in_dims)]
        elif c.variant == "mod_specific_router":
            if len(set(self.in_dims)) != 1:
                raise ConfigError("shared experts need equal feature dims across modalities")
            shared = ExpertBank.init("adapter.shared.experts", c.num_experts, self.in_dims[0], c.d,
                                     rng, std, c.expert_bias)
            self.adapters = [MoEAdapter.init(m, n, c.d, c.num_experts, c.top_k, rng, std, experts=shared)
                             for m, n in zip(self.modalities, self.in_dims)]
        else:
            self.adapters = [MoEAdapter.init(m, n, c.d, c.num_experts, c.top_k, rng, std, c.expert_bias)
                             for m, n in zip(self.modalities, self.in_dims)]
        if c.variant not in ("joint_router", "no_mmf"):
            self.fusion = FusionGate.init(self.modalities, c.d, rng, std)

    def parameters(self) -> list:
        params = [self.user_emb]
        for a in self.adapters:
            params += a.parameters()
        if self.joint is not None:
            params += self.joint.parameters()
        if self.fusion is not None:
            params += self.fusion.parameters()
        seen, out = set(), []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def param_dict(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def item_forward(self, feats, present, routing=None) -> ItemForward:
        """Item embeddings for a batch of feature rows.

        ``feats`` is one (B, in_dim) array per modality (zeros where absent).
        ``routing`` freezes the top-k selections from an earlier pass.
        """
        present = np.asarray(present, dtype=bool)
        if not present.any(axis=1).all():
            raise DataError("an item in the batch has no present modality")
        zero = nx.Var(0.0)
        if self.joint is not None:
            h_all = np.concatenate(feats, axis=1)
            out = adapt_batch(self.joint, h_all, None if routing is None else routing[0])
            alpha = present / present.sum(axis=1, keepdims=True)
            return ItemForward(out.z, nx.Var(alpha), [out.selected], zero,
                               adapter_balance_loss([out.dense_gate]), zero)
        zs, dense, new_routing = [], [], []
        for j, a in enumerate(self.adapters):
            if isinstance(a, Affine):
                zs.append(a(feats[j]))
            else:
                out = adapt_batch(a, feats[j], None if routing is None else routing[j])
                zs.append(out.z)
                dense.append(out.dense_gate)
                new_routing.append(out.selected)
        if dense:
            adapter_loss = adapter_balance_loss(dense, [present[:, j] for j in range(len(dense))])
        else:
            adapter_loss = zero
        fused = fuse_batch(self.fusion, zs, present) if self.fusion is not None else fuse_uniform_batch(zs, present)
        return ItemForward(fused.e, fused.alpha, new_routing, alignment_loss_batch(fused),
                           adapter_loss, fusion_balance_loss(fused.alpha))

    def item_embeddings(self, dataset: Dataset, items) -> tuple[np.ndarray, np.ndarray]:
        items = np.asarray(items, dtype=np.int64)
        out = self.item_forward([f[items] for f in dataset.features], dataset.present[items])
        return out.e.value, out.alpha.value

    def snapshot(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def restore(self, values: dict) -> None:
        for p in self.parameters():
            p.value[...] = values[p.name]


# ---------------------------------------------------------------------------
# losses


def score(e_u, e_i) -> float:
    e_u, e_i = np.asarray(e_u, dtype=np.float64), np.asarray(e_i, dtype=np.float64)
    if e_u.shape != e_i.shape:
        raise ShapeError(f"score: shapes {e_u.shape} and {e_i.shape} differ")
    return float(np.dot(e_u, e_i))


def bpr_loss(triplet_scores) -> tuple[float, float]:
    """Return ``(sum, mean)`` of -ln sigmoid(s_ui - s_uj) over the triplets."""
    s = np.asarray(triplet_scores, dtype=np.float64).reshape(-1, 2)
    if len(s) == 0:
        raise ValueError("bpr_loss on an empty batch")
    per = np.logaddexp(0.0, -(s[:, 0] - s[:, 1]))
    return float(per.sum()), float(per.mean())


def _reduce(x: nx.Var, n: int, reduction: str) -> nx.Var:
    return nx.scale(x, 1.0 / n) if reduction == "mean" else x


def total_loss(model: MamexModel, batch: TripletBatch, dataset: Dataset, routing=None):
    """Composite objective for one triplet batch.

    Returns ``(loss, parts, forward)`` where ``parts`` holds float values of
    each component (bpr as per-triplet mean) and ``forward`` the item pass.
    """
    c = model.config.effective()
    n = len(batch)
    items = np.concatenate([batch.positives, batch.negatives])
    present = dataset.present[items]
    if not present.any(axis=1).all():
        bad = items[~present.any(axis=1)][0]
        raise DataError(f"item {dataset.interactions.item_ids[bad]!r} has no modality features")
    fwd = model.item_forward([f[items] for f in dataset.features], present, routing)
    e_u = nx.gather_rows(model.user_emb, batch.users)
    e_pos = nx.gather_rows(fwd.e, np.arange(n))
    e_neg = nx.gather_rows(fwd.e, np.arange(n, 2 * n))
    diff = nx.sub(nx.rowdot(e_u, e_pos), nx.rowdot(e_u, e_neg))
    bpr_sum = nx.sum_all(nx.softplus(nx.scale(diff, -1.0)))
    bpr = _reduce(bpr_sum, n, c.reduction)
    align = _reduce(fwd.align, 2 * n, c.reduction)
    l2 = None
    for p in model.parameters():
        sq = nx.sum_squares(p)
        l2 = sq if l2 is None else nx.add(l2, sq)
    loss = bpr
    for weight, term in ((c.lambda1, align), (c.lambda2, fwd.adapter), (c.lambda3, fwd.fusion), (c.lambda4, l2)):
        if weight:
            loss = nx.add(loss, nx.scale(term, weight))
    parts = {
        "loss": float(loss),
        "bpr": float(bpr_sum) / n,
        "align": float(fwd.align) / (2 * n),
        "adapter": float(fwd.adapter),
        "fusion": float(fwd.fusion),
        "l2": float(l2),
    }
    return loss, parts, fwd


# ---------------------------------------------------------------------------
# optimizer and state


@dataclass
class TrainState:
    model: MamexModel
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0
    rng: np.random.Generator | None = None
    best_epoch: int = 0
    data_hash: str = ""


def adam_step(state: TrainState, grads: dict, config: ModelConfig) -> TrainState:
    params = state.model.parameters()
    for p in params:
        g = grads[p.name]
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient for {p.name} has shape {g.shape}, expected {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {p.name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = config.adam_beta1, config.adam_beta2
    for p in params:
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value -= config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return state


# ---------------------------------------------------------------------------
# training loop


LOG_COLUMNS = ["epoch", "loss", "bpr", "align", "adapter", "fusion", "l2",
               "valid_rec@10", "valid_rec@20", "valid_ndcg@10", "valid_ndcg@20"]


def new_state(config: ModelConfig, dataset: Dataset) -> TrainState:
    model = MamexModel(config, dataset.interactions.n_users, dataset.modalities, dataset.dims,
                       substream(config.seed, "init"))
    return TrainState(model, rng=substream(config.seed, "sampling"))


def train_epoch(state: TrainState, sampler: TripletSampler, dataset: Dataset) -> dict:
    config = state.model.config
    n_batches = epoch_batches(len(sampler.records), config.batch_size)
    sums = dict.fromkeys(["loss", "bpr", "align", "adapter", "fusion", "l2"], 0.0)
    alpha_sum = np.zeros(len(dataset.modalities))
    alpha_rows = 0
    params = state.model.parameters()
    for _ in range(n_batches):
        batch = sampler.sample(config.batch_size)
        with nx.Tape() as tape:
            loss, parts, fwd = total_loss(state.model, batch, dataset)
        if not math.isfinite(parts["loss"]):
            raise NumericError(f"loss became {parts['loss']} at step {state.step_count}")
        grads = nx.backward(tape, loss, params)
        adam_step(state, grads, config)
        for k in sums:
            sums[k] += parts[k]
        alpha_sum += fwd.alpha.value.sum(axis=0)
        alpha_rows += fwd.alpha.shape[0]
    out = {k: v / n_batches for k, v in sums.items()}
    out["mean_alpha"] = alpha_sum / alpha_rows
    return out


def train(config: ModelConfig, dataset: Dataset, log_path=None):
    """Train with per-epoch validation; the returned model holds the best-valid parameters.

    Returns ``(state, logs)``; each log row is a dict keyed like the epoch TSV.
    """
    from .evaluation import evaluate

    if not dataset.interactions.is_split:
        raise DataError("dataset must be split before training")
    state = new_state(config, dataset)
    model = state.model
    sampler = TripletSampler(dataset.interactions, state.rng)
    best_values, best_score = model.snapshot(), -math.inf
    logs = []
    writer = EpochLogWriter(log_path, dataset.modalities) if log_path else None
    for epoch in range(1, config.epochs + 1):
        try:
            stats = train_epoch(state, sampler, dataset)
        except NumericError as exc:
            model.restore(best_values)
            raise DivergenceError(f"training diverged in epoch {epoch}: {exc}", state) from exc
        valid = evaluate(model, dataset, "valid")
        row = {"epoch": epoch, **{k: stats[k] for k in ("loss", "bpr", "align", "adapter", "fusion", "l2")},
               "valid_rec@10": valid.macro["recall@10"], "valid_rec@20": valid.macro["recall@20"],
               "valid_ndcg@10": valid.macro["ndcg@10"], "valid_ndcg@20": valid.macro["ndcg@20"],
               "mean_alpha": stats["mean_alpha"]}
        logs.append(row)
        if writer:
            writer.write(row)
        log.info("epoch %d loss %.5f valid rec@20 %.4f", epoch, row["loss"], row["valid_rec@20"])
        if row["valid_rec@20"] > best_score:
            best_score = row["valid_rec@20"]
            best_values = model.snapshot()
            state.best_epoch = epoch
    model.restore(best_values)
    return state, logs


def _fmt(x) -> str:
    return repr(float(x))


class EpochLogWriter:
    def __init__(self, path, modalities):
        self.path = Path(path)
        cols = LOG_COLUMNS + [f"mean_alpha_{m}" for m in modalities]
        self.path.write_text("\t".join(cols) + "\n", encoding="utf-8")

    def write(self, row):
        vals = [str(row["epoch"])] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]]
        vals += [_fmt(a) for a in row["mean_alpha"]]
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write("\t".join(vals) + "\n")


def read_epoch_log(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, map(float, line.split("\t")))) for line in lines[1:]]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MAMEXCKP"
VERSION = 1


def save_checkpoint(state: TrainState, path, data_hash: str = "") -> None:
    model = state.model
    params = model.parameters()
    header = {
        "version": VERSION,
        "config": asdict(model.config),
        "data_hash": data_hash,
        "n_users": model.n_users,
        "modalities": model.modalities,
        "in_dims": model.in_dims,
        "step_count": state.step_count,
        "best_epoch": state.best_epoch,
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<HI", VERSION, len(head)) + head
    body += b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 6 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, head_len = struct.unpack_from("<HI", body, len(MAGIC))
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 6
    header = json.loads(body[start:start + head_len])
    offset = start + head_len
    values = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        values[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(body):
        raise IntegrityError(f"{path}: parameter blocks do not match header")
    return header, values


def config_diff(a: dict, b: dict) -> list[str]:
    return [f"{k}: checkpoint={a.get(k)!r} requested={b.get(k)!r}"
            for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]


def load_checkpoint(path, config: ModelConfig | None = None) -> TrainState:
    header, values = read_checkpoint(path)
    saved = ModelConfig(**header["config"])
    if config is not None:
        diff = config_diff(asdict(saved), asdict(config))
        if diff:
            raise CheckpointMismatch("checkpoint config differs:\n  " + "\n  ".join(diff))
    model = MamexModel(saved, header["n_users"], header["modalities"], header["in_dims"],
                       np.random.default_rng(0))
    names = [p.name for p in model.parameters()]
    if names != [s["name"] for s in header["params"]]:
        raise IntegrityError(f"{path}: parameter layout does not match the config")
    model.restore(values)
    return TrainState(model, step_count=header["step_count"], best_epoch=header["best_epoch"],
                      data_hash=header["data_hash"])
