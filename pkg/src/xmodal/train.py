"""Mini-batch Adam training with R_sum early stopping and checkpoints."""

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .align import prepare_batch
from .eval import DEFAULT_KS, retrieval_metrics, score_matrix
from .grad import DEFAULT_LAMBDA, DEFAULT_TAU, HeadParams, backward, init_params

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LMTC"
CKPT_VERSION = 1
HISTORY_FIELDS = ("epoch", "L_g", "L_ext", "L_int", "R_sum")


class DivergenceError(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-6
    batch_size: int = 48
    tau: float = DEFAULT_TAU
    lam: float = DEFAULT_LAMBDA
    max_epochs: int = 50
    patience: int = 5
    eval_ks: tuple = DEFAULT_KS
    seed: int = 0
    rank_score: str = "agg"
    ext_mode: str = "summed"
    use_pe: bool = True
    use_lateral: bool = True
    max_batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        self.eval_ks = tuple(self.eval_ks)
        self.validate()

    def validate(self):
        checks = [
            ("lr", self.lr > 0),
            ("weight_decay", self.weight_decay >= 0),
            ("batch_size", 1 <= self.batch_size <= self.max_batch_size),
            ("tau", self.tau > 0),
            ("lam", self.lam > 0),
            ("max_epochs", self.max_epochs >= 1),
            ("patience", self.patience >= 0),
            ("eval_ks", len(self.eval_ks) > 0 and min(self.eval_ks) >= 1),
            ("rank_score", self.rank_score in ("agg", "global", "sum")),
            ("ext_mode", self.ext_mode in ("summed", "two_term")),
            ("threads", self.threads >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid TrainConfig field '{name}': {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"invalid TrainConfig field '{sorted(unknown)[0]}': unknown field")
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        return d


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, config):
    """One in-place Adam update with decoupled weight decay (decay applied first)."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.blocks().items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new = p - config.lr * config.weight_decay * p - update
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite Adam update for {name}")
        p[...] = new
    return params, state


@dataclass
class Checkpoint:
    params: HeadParams
    epoch: int
    R_sum: float
    rng_state: dict
    config: dict = field(default_factory=dict)

    def save(self, path):
        blocks = self.params.blocks()
        header = {
            "epoch": self.epoch,
            "R_sum": self.R_sum,
            "rng_state": self.rng_state,
            "lambda": self.params.lam,
            "tau": self.params.tau,
            "dim": self.params.dim,
            "config": self.config,
            "blocks": [[k, list(v.shape)] for k, v in blocks.items()],
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in blocks.values())
        Path(path).write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + payload)

    @classmethod
    def load(cls, path):
        buf = Path(path).read_bytes()
        if buf[:4] != CKPT_MAGIC:
            raise ValueError("bad magic")
        if len(buf) < 12:
            raise ValueError("truncated checkpoint")
        version, hlen = struct.unpack("<II", buf[4:12])
        if version != CKPT_VERSION:
            raise ValueError(f"checkpoint version {version}, reader supports {CKPT_VERSION}")
        if 12 + hlen > len(buf):
            raise ValueError("truncated checkpoint")
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        pos = 12 + hlen
        blocks = {}
        for name, shape in header["blocks"]:
            n = int(np.prod(shape)) if shape else 1
            if pos + 8 * n > len(buf):
                raise ValueError("truncated checkpoint")
            blocks[name] = np.frombuffer(buf[pos:pos + 8 * n], dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * n
        if pos != len(buf):
            raise ValueError("trailing bytes in checkpoint")
        params = HeadParams.from_blocks(blocks, header["lambda"], header["tau"])
        return cls(params, header["epoch"], header["R_sum"], header["rng_state"], header.get("config", {}))


def _batches(order, size):
    out = [order[i:i + size] for i in range(0, len(order), size)]
    # a singleton batch has no negatives, every contrastive term vanishes
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def validation_metrics(val_batch, params, config):
    S = score_matrix(val_batch, val_batch, params, config.rank_score, config.threads)
    return retrieval_metrics(S, config.eval_ks)


def fit(train, val, config, params=None, on_epoch=None):
    """Train on ``train`` with early stopping on validation R_sum.

    Returns ``(best checkpoint, history)``; history holds one dict per epoch
    with the mean loss components and the validation R_sum.
    """
    if not train.studies or not val.studies:
        raise ValueError("train and val corpora must be nonempty")
    if train.dim != val.dim or train.grid != val.grid:
        raise ValueError("train/val dim or grid mismatch")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(train.dim, seed=config.seed, lam=config.lam, tau=config.tau)
    tb = prepare_batch(train.studies, config.use_pe, config.use_lateral)
    vb = prepare_batch(val.studies, config.use_pe, config.use_lateral)
    state = AdamState()
    meta = config.to_dict()
    best = None
    since_best = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        sums = {"L_g": 0.0, "L_ext": 0.0, "L_int": 0.0}
        batches = _batches(rng.permutation(len(tb)), config.batch_size)
        for idx in batches:
            loss, grads, comps = backward(tb.subset(idx), params, ext_mode=config.ext_mode,
                                          threads=config.threads, return_components=True)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", best)
            try:
                adam_step(params, grads, state, config)
            except FloatingPointError as exc:
                raise DivergenceError(str(exc), best) from exc
            for k in sums:
                sums[k] += comps[k]
        nb = max(len(batches), 1)
        metrics = validation_metrics(vb, params, config)
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}, "R_sum": metrics["R_sum"]}
        history.append(row)
        log.info("epoch %d  L_g=%.4f L_ext=%.4f L_int=%.4f R_sum=%.2f",
                 epoch, row["L_g"], row["L_ext"], row["L_int"], row["R_sum"])
        if on_epoch is not None:
            on_epoch(row, metrics, params)
        if best is None or metrics["R_sum"] > best.R_sum:
            best = Checkpoint(params.copy(), epoch, metrics["R_sum"],
                              rng.bit_generator.state, meta)
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
    return best, history


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()
