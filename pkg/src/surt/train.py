"""Training loop: frame-budget batching, HEAT/PIT objectives, validation,
checkpoints, metrics and resume."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .mixsim import features_for, waveform_from_record
from .model import ModelConfig, SURTModel, latency_budget_check
from .multitalker import LabelSet, heat_from_pair_losses, pit_from_pair_losses
from .optim import Adam
from .tensor import no_grad

log = logging.getLogger("surt.train")

METRICS_VERSION = "surt-metrics-v1"
METRICS_HEADER = ["update", "train_loss", "val_loss", "lr", "wall_time", "val_loss_pit", "skipped"]
LOSS_KINDS = ("heat", "pit")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; the last good checkpoint is kept."""


@dataclass
class TrainConfig:
    loss: str = "heat"
    updates: int = 2000
    batch_frames: int = 500
    max_batch_items: int = 32
    lr: float = 1e-3
    halve_every: int = 2000
    valid_every: int = 200
    checkpoint_every: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.updates < 0 or self.batch_frames < 1 or self.valid_every < 1 or self.checkpoint_every < 1:
            raise ValueError("updates, batch_frames, valid_every and checkpoint_every must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    id: str
    feats: np.ndarray  # [3, T, F], float32 to halve the cache footprint
    labels: list[list[int]]  # ordered by start time

    @property
    def n_frames(self) -> int:
        return self.feats.shape[1]


def load_examples(records: Sequence[dict], root: Path | None = None) -> list[Example]:
    out = []
    for rec in records:
        wav = waveform_from_record(rec, root)
        order = LabelSet.from_unordered(rec["transcripts"], rec["starts_s"], [f"{j}" for j in range(len(rec["transcripts"]))])
        out.append(Example(rec["id"], features_for(wav).astype(np.float32), order.labels))
    return out


def feasible(ex: Example, reduction: int) -> bool:
    """Every reference fits in the reduced frame count (at most one token
    per encoder frame)."""
    t_red = -(-ex.n_frames // reduction)
    return all(len(y) <= t_red for y in ex.labels)


def make_batches(lengths: Sequence[int], batch_frames: int, max_items: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, sort within windows of 64 by length, then pack greedily so
    that items x padded length stays within ``batch_frames``."""
    idx = rng.permutation(len(lengths))
    batches: list[list[int]] = []
    for w in range(0, len(idx), 64):
        window = sorted(idx[w : w + 64], key=lambda i: lengths[i])
        cur: list[int] = []
        for i in window:
            longest = max([lengths[j] for j in cur] + [lengths[i]])
            if cur and (longest * (len(cur) + 1) > batch_frames or len(cur) >= max_items):
                batches.append(cur)
                cur = []
            cur.append(int(i))
        if cur:
            batches.append(cur)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def collate(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray, list[list[list[int]]]]:
    lens = np.array([e.n_frames for e in examples])
    C, _, Fq = examples[0].feats.shape
    X = np.zeros((len(examples), C, int(lens.max()), Fq))
    for b, e in enumerate(examples):
        X[b, :, : e.n_frames] = e.feats
    return X, lens, [e.labels for e in examples]


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def batch_objective(model: SURTModel, X, lens, labels, loss: str):
    """Per-item losses [B] and the chosen permutation per item."""
    enc = model.encode(X, lens)
    S = enc["n_streams"]
    if S != len(labels[0]):
        raise ValueError(f"model has {S} output streams but references have {len(labels[0])}")
    identity = [tuple(range(S))] * len(labels)
    if S == 1:
        return model.pair_losses(enc, labels, [(0, 0)]).reshape(-1), identity
    if loss == "heat":
        return heat_from_pair_losses(model.pair_losses(enc, labels, [(i, i) for i in range(S)])), identity
    pairs = [(i, j) for i in range(S) for j in range(S)]
    mat = model.pair_losses(enc, labels, pairs).reshape(len(labels), S, S)
    return pit_from_pair_losses(mat)


def evaluate_loss(model: SURTModel, examples: Sequence[Example], loss: str, batch_frames: int, max_items: int) -> float:
    """Mean per-utterance loss over ``examples`` (no gradients)."""
    if not examples:
        return math.nan
    lengths = [e.n_frames for e in examples]
    order = sorted(range(len(examples)), key=lambda i: lengths[i])
    total = 0.0
    with no_grad():
        cur: list[int] = []
        groups = []
        for i in order:
            if cur and (lengths[i] * (len(cur) + 1) > batch_frames or len(cur) >= max_items):
                groups.append(cur)
                cur = []
            cur.append(i)
        if cur:
            groups.append(cur)
        for g in groups:
            X, lens, labels = collate([examples[i] for i in g])
            per, _ = batch_objective(model, X, lens, labels, loss)
            total += float(per.data.sum())
    return total / len(examples)


def warm_start(model: SURTModel, arrays: dict[str, np.ndarray]) -> list[str]:
    """Copy every array whose name and shape match a model parameter.

    Blocks absent from ``arrays`` (e.g. MaskEnc or the SD stacks when
    starting from a single-talker model) keep their fresh initialization.
    Returns the copied names.
    """
    copied = []
    for name, p in model.params.items():
        src = arrays.get(name)
        if src is not None and src.shape == p.data.shape:
            p.data[...] = src
            copied.append(name)
    if not copied:
        raise ValueError("warm start matched no parameters")
    return copied


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(
        self,
        model: SURTModel,
        tcfg: TrainConfig,
        train: Sequence[Example],
        valid: Sequence[Example],
        out_dir: Path | str,
    ):
        tcfg.validate()
        latency_budget_check(model.cfg)
        self.model = model
        self.tcfg = tcfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        r = model.cfg.time_reduction
        self.train = [e for e in train if feasible(e, r)]
        self.valid = [e for e in valid if feasible(e, r)]
        self.skipped = (len(train) - len(self.train)) + (len(valid) - len(self.valid))
        if self.skipped:
            log.warning("skipped %d infeasible utterances (references longer than reduced frame count)", self.skipped)
        if not self.train:
            raise ValueError("no feasible training utterances")
        self.opt = Adam(model.params, lr=tcfg.lr, halve_every=tcfg.halve_every)
        self.update = 0
        self.epoch = 0
        self.batch_pos = 0
        self.best_val = math.inf
        self.wall = 0.0
        self._batches: list[list[int]] | None = None

    # -- state ------------------------------------------------------------
    def state(self) -> ckpt_io.Checkpoint:
        opt = {f"m.{k}": v for k, v in self.opt.state.m.items()}
        opt.update({f"v.{k}": v for k, v in self.opt.state.v.items()})
        counters = {
            "update": self.update,
            "epoch": self.epoch,
            "batch_pos": self.batch_pos,
            "adam_step": self.opt.state.step,
            "skipped": self.skipped,
            "best_val": self.best_val,
            "wall": self.wall,
        }
        return ckpt_io.Checkpoint(self.model.state_arrays(), opt, counters, self.model.cfg.to_text())

    def restore(self, ck: ckpt_io.Checkpoint) -> None:
        self.model.load_arrays(ck.params)
        for k in self.model.params:
            self.opt.state.m[k] = ck.optimizer[f"m.{k}"].copy()
            self.opt.state.v[k] = ck.optimizer[f"v.{k}"].copy()
        c = ck.counters
        self.update = int(c["update"])
        self.epoch = int(c["epoch"])
        self.batch_pos = int(c["batch_pos"])
        self.opt.state.step = int(c["adam_step"])
        self.best_val = float(c["best_val"])
        self.wall = float(c["wall"])
        self._batches = None

    def save(self, name: str) -> Path:
        path = self.out / name
        ckpt_io.save(path, self.state())
        return path

    # -- loop ---------------------------------------------------------------
    def _epoch_batches(self) -> list[list[int]]:
        rng = np.random.default_rng([self.tcfg.seed, self.epoch])
        return make_batches([e.n_frames for e in self.train], self.tcfg.batch_frames, self.tcfg.max_batch_items, rng)

    def _next_batch(self) -> list[int]:
        if self._batches is None:
            self._batches = self._epoch_batches()
        if self.batch_pos >= len(self._batches):
            self.epoch += 1
            self.batch_pos = 0
            self._batches = self._epoch_batches()
        b = self._batches[self.batch_pos]
        self.batch_pos += 1
        return b

    def step(self) -> tuple[float, list[float], list[tuple[int, ...]]]:
        idx = self._next_batch()
        X, lens, labels = collate([self.train[i] for i in idx])
        self.model.training = True
        self.model.dropout_rng = np.random.default_rng([self.tcfg.seed, 1, self.update])
        self.opt.zero_grad()
        per, perms = batch_objective(self.model, X, lens, labels, self.tcfg.loss)
        self.model.training = False
        value = float(per.data.mean())
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite training loss at update {self.update + 1}")
        (per.sum() * (1.0 / len(idx))).backward()
        try:
            self.opt.step()
        except FloatingPointError as exc:
            raise TrainingAborted(f"update {self.update + 1}: {exc}") from exc
        self.update += 1
        return value, per.data.tolist(), perms

    def validate(self) -> tuple[float, float]:
        t = self.tcfg
        own = evaluate_loss(self.model, self.valid, t.loss, t.batch_frames, t.max_batch_items)
        if self.model.n_streams == 1:
            return own, own
        pit = own if t.loss == "pit" else evaluate_loss(self.model, self.valid, "pit", t.batch_frames, t.max_batch_items)
        return own, pit

    def run(self, updates: int | None = None) -> dict:
        """Train until ``updates`` total updates (default from the config)."""
        target = self.tcfg.updates if updates is None else updates
        metrics_path = self.out / "metrics.csv"
        batch_path = self.out / "batches.jsonl"
        fresh = not metrics_path.exists() or self.update == 0
        if fresh:
            batch_path.unlink(missing_ok=True)
        else:
            # drop rows logged after the checkpoint we resumed from
            _truncate_log(metrics_path, self.update, header_lines=2)
            if batch_path.exists():
                _truncate_log(batch_path, self.update, header_lines=0)
        batch_log = batch_path.open("a", encoding="utf-8")
        mfh = metrics_path.open("w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(mfh, lineterminator="\n")
        if fresh:
            mfh.write(f"# {METRICS_VERSION}\n")
            writer.writerow(METRICS_HEADER)
            val, val_pit = self.validate()
            writer.writerow([0, "", f"{val:.6f}", f"{self.opt.state.lr:.6g}", f"{self.wall:.3f}", f"{val_pit:.6f}", self.skipped])
            mfh.flush()
            self.initial_val = val
            if self.update == 0:
                self.save("last.ckpt")
        recent: list[float] = []
        try:
            while self.update < target:
                t0 = time.perf_counter()
                value, per, perms = self.step()
                self.wall += time.perf_counter() - t0
                recent.append(value)
                batch_log.write(
                    json.dumps({"update": self.update, "loss_type": self.tcfg.loss, "loss": value, "per_item": per, "perms": [list(p) for p in perms]})
                    + "\n"
                )
                if self.update % self.tcfg.valid_every == 0 or self.update == target:
                    val, val_pit = self.validate()
                    train_loss = float(np.mean(recent))
                    recent = []
                    writer.writerow(
                        [self.update, f"{train_loss:.6f}", f"{val:.6f}", f"{self.opt.state.lr:.6g}", f"{self.wall:.3f}", f"{val_pit:.6f}", self.skipped]
                    )
                    mfh.flush()
                    log.info("update %d train %.4f val %.4f (pit %.4f) lr %.3g", self.update, train_loss, val, val_pit, self.opt.state.lr)
                    if val < self.best_val:
                        self.best_val = val
                        self.save("best.ckpt")
                if self.update % self.tcfg.checkpoint_every == 0 or self.update == target:
                    self.save("last.ckpt")
        finally:
            mfh.close()
            batch_log.close()
        return {"updates": self.update, "best_val": self.best_val, "skipped": self.skipped, "wall": self.wall}


def _truncate_log(path: Path, update: int, header_lines: int) -> None:
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    keep = lines[:header_lines]
    for line in lines[header_lines:]:
        u = json.loads(line)["update"] if line.startswith("{") else int(line.split(",", 1)[0])
        if u <= update:
            keep.append(line)
    path.write_text("".join(keep), encoding="utf-8")


def read_metrics(path: Path | str) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# {METRICS_VERSION}":
            raise ValueError(f"{path}: unsupported metrics format {first!r}")
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if v not in ("", None) else math.nan) for k, v in r.items()})
    return out


def save_train_config(path: Path | str, tcfg: TrainConfig, model_cfg: ModelConfig) -> None:
    Path(path).write_text(json.dumps({"train": asdict(tcfg), "model": model_cfg.to_text()}, indent=2, sort_keys=True) + "\n")
