"""Self-check suites behind ``surt gradcheck`` and ``surt losscheck``.

Each suite returns ``(name, passed, detail)`` triples.
"""

from __future__ import annotations

import numpy as np

from .gradcheck import finite_difference_check, finite_difference_report
from .model import ModelConfig, SURTModel
from .multitalker import heat_loss, pit_loss
from .tensor import Tensor
from .transducer import rnnt_loss, rnnt_loss_batch, rnnt_loss_oracle

LOSS_TOL = 1e-9
KERNEL_GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3
# share of coordinates the smoothness screen may set aside (kinks within
# eps, or gradients so small that differences are pure roundoff)
MAX_UNRELIABLE = 0.10
# central-difference step for the loss kernel: smaller steps are dominated by
# roundoff on near-zero gradient entries
LOSS_GRAD_EPS = 1e-3


def random_lattice(rng: np.random.Generator, T: int, U: int, V: int, scale: float = 2.0):
    logits = scale * rng.standard_normal((T, U + 1, V + 1))
    labels = rng.integers(V, size=U).tolist()
    return logits, labels


def tiny_config(unmix: str = "mask", mixenc: bool = True) -> ModelConfig:
    """Smallest configuration that still passes three frequency pools."""
    return ModelConfig(
        unmix=unmix,
        mixenc=mixenc,
        n_freq=27,
        conv_channels=[2, 2, 2, 2],
        feat_dim=4,
        sd_hidden=4,
        enc_layers=1,
        enc_hidden=4,
        label_hidden=4,
        embed_dim=3,
        joint_dim=5,
        vocab_size=3,
    )


def tiny_batch(rng: np.random.Generator, n_frames: int = 6, n_freq: int = 27):
    feats = np.abs(rng.standard_normal((3, n_frames, n_freq))) * 2.0
    labels = [rng.integers(3, size=2).tolist(), rng.integers(3, size=1).tolist()]
    return feats, labels


def jitter_conv_biases(model: SURTModel, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move conv biases off zero: with zero bias an all-zero input patch lands
    exactly on the ReLU kink, where central differences see half a slope."""
    for name, p in model.params.items():
        if ".convs." in name and name.endswith(".b"):
            p.data[:] = rng.uniform(-scale, scale, p.shape)


def model_loss_fn(model: SURTModel, feats, labels, objective: str = "heat"):
    ctx = None

    def f():
        nonlocal ctx
        um = model.unmix(model.prepare_input(feats))
        streams = [h.reshape(h.shape[1:]) for h in um["streams"]]
        ctx = model.rnnt_context()
        if objective == "heat":
            return heat_loss(streams, labels, ctx)
        return pit_loss(streams, labels, ctx)[0]

    return f


def run_losscheck_suite(seed: int = 0, n: int = 100) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_batch = 0.0
    for _ in range(n):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5))
        z, y = random_lattice(rng, T, U, V)
        fast = float(rnnt_loss(z, y).data)
        worst = max(worst, abs(fast - rnnt_loss_oracle(z, y)))
        # same lattice padded inside a batch
        pad = np.concatenate([z, rng.standard_normal((2, U + 1, V + 1))], axis=0)
        lab = np.asarray([y], dtype=np.int64).reshape(1, U)
        batched = float(rnnt_loss_batch(Tensor(pad[None]), lab, np.array([T]), np.array([U])).data[0])
        worst_batch = max(worst_batch, abs(batched - fast))
    return [
        (f"loss vs path enumeration ({n} instances)", bool(worst <= LOSS_TOL), f"max |diff| = {worst:.3e}"),
        ("padded batch vs single utterance", bool(worst_batch <= LOSS_TOL), f"max |diff| = {worst_batch:.3e}"),
    ]


def run_gradcheck_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []
    worst = 0.0
    for _ in range(20):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5))
        z, y = random_lattice(rng, T, U, V)
        p = Tensor(z, requires_grad=True)
        worst = max(worst, finite_difference_check(lambda: rnnt_loss(p, y), [p], eps=LOSS_GRAD_EPS))
    results.append(("transducer loss gradient", bool(worst <= KERNEL_GRAD_TOL), f"max rel err = {worst:.3e}"))
    for unmix, objective in (("mask", "heat"), ("sd", "heat"), ("mask", "pit")):
        model = SURTModel(tiny_config(unmix), seed=int(rng.integers(2**31)))
        jitter_conv_biases(model, rng)
        feats, labels = tiny_batch(rng)
        rep = finite_difference_report(model_loss_fn(model, feats, labels, objective), list(model.params.values()))
        ok = bool(rep.max_rel_err <= MODEL_GRAD_TOL) and rep.unreliable_fraction <= MAX_UNRELIABLE
        detail = f"max rel err = {rep.max_rel_err:.3e} over {rep.n_checked} coords, {rep.n_unreliable} screened out"
        results.append((f"end-to-end {unmix}/{objective} gradient", ok, detail))
    return results
