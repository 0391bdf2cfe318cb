"""EGEAN network: exposure-pretrained shared embeddings, per-task LoRA
adapters, EPNet/PPNet gates and CTR/CVR towers.

All parameters are :class:`~egean.autodiff.Tensor` leaves registered by a
dotted name, so optimizers, checkpoints and ablation checks share one view
of the model.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Schema

TASKS = ("ctr", "cvr")
CHECKPOINT_HEADER = "EGEAN-CKPT-1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 5
    lora_rank: int = 2
    exposure_hidden: Tuple[int, ...] = (16,)
    tower_hidden: Tuple[int, ...] = (16, 8)
    imputation_hidden: Tuple[int, ...] = (16,)
    prior_dim: int = 8
    slope: float = 0.2
    # "own": every tower layer gets its own PPNet gate; "epnet": layer 1 reuses delta_task
    ppnet_gate: str = "own"
    exposure_network_on: bool = True
    task_personalized_network_on: bool = True
    metric_learning_on: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.ppnet_gate not in ("own", "epnet"):
            raise ModelError(f"ppnet_gate must be 'own' or 'epnet', got {self.ppnet_gate!r}")
        if not 0.0 < self.slope < 1.0:
            raise ModelError("slope must lie in (0, 1)")
        if len(self.tower_hidden) < 1:
            raise ModelError("task towers need at least one layer")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("exposure_hidden", "tower_hidden", "imputation_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per component, so adding one never shifts another's init."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.W = ad.xavier_init((n_in, n_out), rng, name=f"{name}.W")
        self.b = ad.xavier_init((n_out,), rng, name=f"{name}.b")

    def __call__(self, h: ad.Tensor) -> ad.Tensor:
        if h.shape[-1] != self.W.shape[0]:
            raise ModelError(f"{self.W.name}: input width {h.shape[-1]} != {self.W.shape[0]}")
        return h @ self.W + self.b

    def params(self) -> List[ad.Tensor]:
        return [self.W, self.b]


class MLP:
    """Dense stack with LeakyReLU between layers and a linear scalar output."""

    def __init__(self, n_in: int, hidden: Sequence[int], rng, name: str, slope: float):
        dims = [n_in, *hidden, 1]
        self.layers = [Dense(a, b, rng, f"{name}.l{k}") for k, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.slope = slope

    def __call__(self, h: ad.Tensor) -> ad.Tensor:
        for layer in self.layers[:-1]:
            h = ad.leaky_relu(layer(h), self.slope)
        return self.layers[-1](h)

    def params(self) -> List[ad.Tensor]:
        return [p for layer in self.layers for p in layer.params()]


class GateNU:
    """Two dense layers, hidden LeakyReLU, output ``2*sigmoid`` in (0, 2)."""

    def __init__(self, n_in: int, n_out: int, rng, name: str, slope: float):
        self.l0 = Dense(n_in, n_out, rng, f"{name}.l0")
        self.l1 = Dense(n_out, n_out, rng, f"{name}.l1")
        self.slope = slope

    def __call__(self, h: ad.Tensor) -> ad.Tensor:
        return 2.0 * ad.sigmoid(self.l1(ad.leaky_relu(self.l0(h), self.slope)))

    def params(self) -> List[ad.Tensor]:
        return self.l0.params() + self.l1.params()


class LoraAdapter:
    """Low-rank update ``B @ A`` for a frozen ``d x k`` matrix; ``B`` starts at zero."""

    def __init__(self, d: int, k: int, rank: int, rng, name: str):
        if rank < 1 or rank > min(d, k) / 2:
            raise ModelError(f"LoRA rank {rank} must satisfy 1 <= r <= min(d, k)/2 = {min(d, k) / 2}")
        self.rank = rank
        self.A = ad.xavier_init((rank, k), rng, name=f"{name}.A")
        self.B = ad.Tensor(np.zeros((d, rank)), trainable=True, name=f"{name}.B")

    def rows(self, index: np.ndarray) -> ad.Tensor:
        """Rows of ``B @ A`` selected by ``index`` without forming the full product."""
        return ad.take_rows(self.B, index) @ self.A

    def params(self) -> List[ad.Tensor]:
        return [self.A, self.B]


def lora_effective_weight(W: ad.Tensor, adapter: LoraAdapter) -> ad.Tensor:
    if adapter.B.shape[0] != W.shape[0] or adapter.A.shape[1] != W.shape[1]:
        raise ModelError(f"LoRA factors {adapter.B.shape} x {adapter.A.shape} do not fit weight {W.shape}")
    return ad.stop_gradient(W) + adapter.B @ adapter.A


def epnet_transform(delta: ad.Tensor, emb: ad.Tensor) -> ad.Tensor:
    if delta.shape[-1] != emb.shape[-1]:
        raise ModelError(f"gate width {delta.shape[-1]} != embedding width {emb.shape[-1]}")
    return delta * emb


def ppnet_layer(h: ad.Tensor, gate: Optional[ad.Tensor], layer: Dense, slope: float) -> ad.Tensor:
    """``f((gate * h) W + b)``; ``gate=None`` is a plain dense layer."""
    if gate is not None:
        if gate.shape != h.shape:
            raise ModelError(f"gate shape {gate.shape} != hidden shape {h.shape}")
        h = gate * h
    return ad.leaky_relu(layer(h), slope)


class TaskTower:
    def __init__(self, n_in: int, hidden: Sequence[int], rng, name: str, slope: float):
        dims = [n_in, *hidden]
        self.layers = [Dense(a, b, rng, f"{name}.l{k}") for k, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.head = Dense(dims[-1], 1, rng, f"{name}.head")
        self.widths = dims[:-1]
        self.slope = slope

    def __call__(self, h: ad.Tensor, gates: Optional[Sequence[ad.Tensor]] = None) -> ad.Tensor:
        for k, layer in enumerate(self.layers):
            h = ppnet_layer(h, None if gates is None else gates[k], layer, self.slope)
        return ad.sigmoid(self.head(h))

    def params(self) -> List[ad.Tensor]:
        return [p for layer in self.layers for p in layer.params()] + self.head.params()


class EmbeddingTable:
    """One table over all fields; field ``k`` owns rows ``offset[k] .. offset[k]+vocab[k]``."""

    def __init__(self, vocab_sizes: Sequence[int], dim: int, rng):
        self.offsets = np.concatenate([[0], np.cumsum(vocab_sizes)[:-1]]).astype(np.int64)
        # per-field Glorot fans, as if each field had its own table
        blocks = [ad.xavier_init((v, dim), rng).data for v in vocab_sizes]
        self.W = ad.Tensor(np.concatenate(blocks), trainable=True, name="embedding.W")
        self.dim = dim

    @property
    def frozen(self) -> bool:
        return not self.W.trainable

    def set_frozen(self, frozen: bool) -> None:
        self.W.trainable = not frozen
        self.W.requires_grad = not frozen

    def row_index(self, codes: np.ndarray) -> np.ndarray:
        return (np.asarray(codes, dtype=np.int64) + self.offsets).reshape(-1)


@dataclass
class TaskBlock:
    tower: TaskTower
    lora: Optional[LoraAdapter] = None
    prior: Optional[ad.Tensor] = None
    epnet: Optional[GateNU] = None
    ppnet: List[Optional[GateNU]] = field(default_factory=list)

    def params(self) -> List[ad.Tensor]:
        out = []
        if self.lora is not None:
            out += self.lora.params()
        if self.prior is not None:
            out.append(self.prior)
        if self.epnet is not None:
            out += self.epnet.params()
        for g in self.ppnet:
            if g is not None:
                out += g.params()
        return out + self.tower.params()


class EgeanModel:
    def __init__(self, schema: Schema, config: ModelConfig = ModelConfig()):
        self.schema = schema
        self.config = config
        c = config
        n_fields = len(schema.fields)
        self.width = n_fields * c.embed_dim
        self.embedding = EmbeddingTable(schema.vocab_sizes, c.embed_dim, component_rng(c.seed, "embedding"))
        # user fields first, then item fields
        self.field_order = np.array(schema.side_index("user") + schema.side_index("item"), dtype=np.int64)
        self.exposure = (MLP(self.width, c.exposure_hidden, component_rng(c.seed, "exposure"), "exposure", c.slope)
                         if c.exposure_network_on else None)
        self.tasks: Dict[str, TaskBlock] = {}
        for task in TASKS:
            tower = TaskTower(self.width, c.tower_hidden, component_rng(c.seed, f"{task}.tower"),
                              f"{task}.tower", c.slope)
            block = TaskBlock(tower=tower)
            if c.task_personalized_network_on:
                rng = component_rng(c.seed, f"{task}.tpn")
                block.lora = LoraAdapter(self.embedding.W.shape[0], c.embed_dim, c.lora_rank, rng, f"{task}.lora")
                block.prior = ad.xavier_init((1, c.prior_dim), rng, name=f"{task}.prior")
                block.epnet = GateNU(c.prior_dim + self.width, self.width, rng, f"{task}.epnet", c.slope)
                block.ppnet = [None if (k == 0 and c.ppnet_gate == "epnet") else
                               GateNU(c.prior_dim + self.width, w, rng, f"{task}.ppnet{k}", c.slope)
                               for k, w in enumerate(tower.widths)]
            self.tasks[task] = block
        self.imputation = MLP(self.width, c.imputation_hidden, component_rng(c.seed, "imputation"),
                              "imputation", c.slope)

    # -- parameter views ---------------------------------------------------

    def parameters(self) -> Dict[str, ad.Tensor]:
        out = {"embedding.W": self.embedding.W}
        if self.exposure is not None:
            out.update({p.name: p for p in self.exposure.params()})
        for block in self.tasks.values():
            out.update({p.name: p for p in block.params()})
        out.update({p.name: p for p in self.imputation.params()})
        return out

    def trainable_names(self) -> List[str]:
        return sorted(n for n, p in self.parameters().items() if p.trainable)

    def group(self, name: str) -> List[ad.Tensor]:
        """Parameters updated together in one phase of finetuning."""
        if name in TASKS:
            return self.tasks[name].params()
        if name == "imputation":
            return self.imputation.params()
        if name == "exposure":
            return [self.embedding.W] + (self.exposure.params() if self.exposure else [])
        if name == "embedding":
            return [self.embedding.W]
        raise KeyError(name)

    # -- forward pieces ----------------------------------------------------

    def _ordered(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != len(self.schema.fields):
            raise ModelError(f"expected codes of shape (n, {len(self.schema.fields)}), got {codes.shape}")
        return codes

    def _rows(self, codes: np.ndarray) -> np.ndarray:
        codes = self._ordered(codes)
        return (codes + self.embedding.offsets)[:, self.field_order].reshape(-1)

    def shared_embedding(self, codes: np.ndarray) -> ad.Tensor:
        """``x_ui``: concatenated user-field then item-field embeddings."""
        rows = self._rows(codes)
        n = rows.size // len(self.field_order)
        return ad.reshape(ad.take_rows(self.embedding.W, rows), (n, self.width))

    def exposure_forward(self, x: ad.Tensor) -> ad.Tensor:
        if self.exposure is None:
            raise ModelError("exposure network disabled by configuration")
        if x.shape[-1] != self.width:
            raise ModelError(f"exposure input width {x.shape[-1]} != {self.width}")
        return ad.sigmoid(self.exposure(x))

    def _prior(self, block: TaskBlock, n: int) -> ad.Tensor:
        return ad.Tensor(np.ones((n, 1))) @ block.prior

    def epnet_gate(self, task: str, prior: ad.Tensor, emb: ad.Tensor) -> ad.Tensor:
        return self.tasks[task].epnet(ad.concat([prior, ad.stop_gradient(emb)], axis=1))

    def task_embedding(self, task: str, codes: np.ndarray, shared: ad.Tensor):
        """Return ``(O_ep, prior, delta_task)`` for a task.

        Without the task-personalized network the shared embedding passes
        through unchanged and the other two are ``None``.
        """
        block = self.tasks[task]
        if block.lora is None:
            return shared, None, None
        rows = self._rows(codes)
        n = shared.shape[0]
        adapted = shared + ad.reshape(block.lora.rows(rows), (n, self.width))
        prior = self._prior(block, n)
        delta = self.epnet_gate(task, prior, adapted)
        return epnet_transform(delta, adapted), prior, delta

    def tower_forward(self, task: str, o_ep: ad.Tensor, prior=None, delta=None) -> ad.Tensor:
        block = self.tasks[task]
        if block.lora is None:
            return block.tower(o_ep)
        gate_in = ad.concat([prior, ad.stop_gradient(o_ep)], axis=1)
        gates = [delta if g is None else g(gate_in) for g in block.ppnet]
        return block.tower(o_ep, gates)

    def task_forward(self, task: str, codes: np.ndarray, shared: Optional[ad.Tensor] = None):
        if shared is None:
            shared = self.shared_embedding(codes)
        o_ep, prior, delta = self.task_embedding(task, codes, shared)
        return self.tower_forward(task, o_ep, prior, delta), o_ep

    def imputation_forward(self, shared: ad.Tensor) -> ad.Tensor:
        """Non-negative imputed CVR error from the detached shared embedding."""
        return ad.softplus(self.imputation(ad.stop_gradient(shared)))

    def forward(self, codes: np.ndarray) -> dict:
        shared = self.shared_embedding(codes)
        ctr, _ = self.task_forward("ctr", codes, shared)
        cvr, cvr_emb = self.task_forward("cvr", codes, shared)
        return {
            "ctr_prob": ctr,
            "cvr_prob": cvr,
            "ctcvr_prob": ctr * cvr,
            "cvr_embeddings": cvr_emb,
            "shared_embeddings": shared,
        }

    def predict(self, codes: np.ndarray, chunk: int = 4096) -> Dict[str, np.ndarray]:
        """Forward-only evaluation returning flat numpy arrays."""
        parts: Dict[str, list] = {}
        with ad.no_tape():
            for start in range(0, len(codes), chunk):
                part = codes[start:start + chunk]
                out = self.forward(part)
                out["imputed_error"] = self.imputation_forward(out["shared_embeddings"])
                for k, v in out.items():
                    parts.setdefault(k, []).append(v.data)
        res = {k: np.concatenate(v) for k, v in parts.items()}
        for k in ("ctr_prob", "cvr_prob", "ctcvr_prob", "imputed_error"):
            res[k] = res[k].reshape(-1)
        return res


# ---------------------------------------------------------------------------
# checkpoints: header line, JSON index line, raw little-endian float64 payload


def save_checkpoint(model: EgeanModel, path, extra: Optional[dict] = None) -> None:
    params = model.parameters()
    names = sorted(params)
    index, offset = [], 0
    for name in names:
        p = params[name]
        index.append({"name": name, "shape": list(p.shape), "offset": offset,
                      "trainable": p.trainable})
        offset += p.size
    meta = {"config": asdict(model.config), "schema": model.schema.to_json(),
            "params": index, "extra": extra or {}}
    payload = b"".join(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_HEADER + "\n").encode())
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> Tuple[EgeanModel, dict]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise ModelError(f"{path}: not an EGEAN checkpoint (header {header!r})")
        meta = json.loads(fh.readline().decode())
        (length,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(length)
    if len(payload) != length:
        raise ModelError(f"{path}: truncated checkpoint payload")
    model = EgeanModel(Schema.from_json(meta["schema"]), ModelConfig.from_dict(meta["config"]))
    params = model.parameters()
    values = np.frombuffer(payload, dtype="<f8")
    for entry in meta["params"]:
        p = params.get(entry["name"])
        if p is None or list(p.shape) != entry["shape"]:
            raise ModelError(f"{path}: parameter {entry['name']} does not match the configured model")
        p.data = values[entry["offset"]:entry["offset"] + p.size].reshape(p.shape).astype(np.float64)
        p.trainable = p.requires_grad = bool(entry["trainable"])
    return model, meta.get("extra", {})
