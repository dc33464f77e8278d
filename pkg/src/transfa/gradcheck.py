"""Finite-difference check of every parameter gradient of the total loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import AttributeGroupSpec, LossWeights, toy_gradcheck_model
from .losses import compute_losses
from .model import TransFA

TOLERANCE = 1e-4


@dataclass
class BlockResult:
    name: str
    size: int
    grad_norm: float
    rel_error: float


@dataclass
class GradcheckReport:
    blocks: list[BlockResult] = field(default_factory=list)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max((b.rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_table(self) -> str:
        width = max(len(b.name) for b in self.blocks) + 2
        lines = [f"{'block':<{width}}{'size':>7}{'|grad|':>12}{'rel err':>12}"]
        for b in self.blocks:
            lines.append(f"{b.name:<{width}}{b.size:>7}{b.grad_norm:>12.3e}{b.rel_error:>12.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max rel err {self.max_error:.3e} (tolerance {self.tolerance:g}) {verdict} "
                     f"in {self.seconds:.1f}s")
        return "\n".join(lines) + "\n"


def toy_problem(seed: int = 0):
    """Toy model plus a 4-image batch with a repeated identity, so every loss term is active.

    Zero-initialised blocks (biases, bias tables) are redrawn at random: with
    exact zeros an all-dropped hidden layer puts the next ReLU exactly on its
    kink, where the finite difference is meaningless.
    """
    spec = AttributeGroupSpec.build([("upper", ["a0", "a1"]), ("lower", ["a2", "a3", "a4"])])
    model = TransFA.create(toy_gradcheck_model(num_identities=3), spec, seed=seed)
    rng = np.random.default_rng([seed, 1])
    for p in model.params.values():
        if not p.data.any():
            p.data = rng.normal(0.0, 0.1, size=p.shape)
    images = rng.uniform(-1.0, 1.0, size=(4, 3, 16, 16))
    labels = rng.integers(0, 2, size=(4, spec.num_attributes)).astype(np.float64)
    identities = np.array([0, 0, 1, 2])
    return model, images, labels, identities


def check_gradients(model: TransFA, images, labels, identities, weights: LossWeights | None = None,
                    step: float = 1e-6, dropout_seed: int = 0, training: bool = True) -> GradcheckReport:
    """Compare back-propagated and central-difference gradients block by block.

    Dropout masks are redrawn from the same seed on every evaluation, so the
    loss is a deterministic function of the parameters.  BatchNorm running
    statistics are restored afterwards.
    """
    weights = weights or LossWeights()
    saved = {k: v.copy() for k, v in model.buffers.items()}

    def total() -> ad.Tensor:
        fwd = model.forward(images, training=training, rng=np.random.default_rng(dropout_seed))
        return compute_losses(fwd.bundle, labels, identities, model.spec, weights).loss_total

    def value() -> float:
        with ad.no_grad():
            return total().item()

    start = time.perf_counter()
    names = list(model.params)
    root = total()
    analytic = ad.grad(root, [model.params[n] for n in names])
    noise = ad.fd_noise(root.item(), step)
    report = GradcheckReport()
    for name, g in zip(names, analytic):
        num = ad.numerical_gradient(value, model.params[name].data, step)
        # below this norm a difference of rounding-noise size would read as a large relative error
        floor = noise * np.sqrt(g.size) / TOLERANCE
        report.blocks.append(BlockResult(name, g.size, float(np.linalg.norm(g)), ad.relative_error(g, num, floor)))
    report.seconds = time.perf_counter() - start
    model.buffers.update(saved)
    return report


def run_toy_gradcheck(seed: int = 0) -> GradcheckReport:
    model, images, labels, identities = toy_problem(seed)
    return check_gradients(model, images, labels, identities)
