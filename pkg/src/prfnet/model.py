"""The assembled network: shared backbone plus comparison head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig, extract_triplet
from .head import PRFHead
from .tensor import Tensor, get_default_dtype


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mlp_hidden: int = 32
    cascaded: bool = True

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls(backbone=BackboneConfig.full(), mlp_hidden=128)

    def as_dict(self) -> dict:
        return asdict(self)


class PRFNet:
    """Scores a triplet (O, A, B); ``q`` is the probability that B is closer to O.

    Parameters live under two namespaces, ``backbone.`` and ``head.``.
    ``trained_stages`` records which training stages produced the weights.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.cfg.backbone, rng)
        self.head = PRFHead(self.cfg.backbone.stage_widths, self.cfg.mlp_hidden, rng, cascaded=self.cfg.cascaded)
        self.trained_stages: list[str] = []
        for prefix, module in self._parts():
            module.name_parameters(prefix)

    def _parts(self):
        return (("backbone.", self.backbone), ("head.", self.head))

    # parameter / state plumbing -------------------------------------------
    def named_parameters(self):
        for prefix, module in self._parts():
            yield from module.named_parameters(prefix)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, module in self._parts():
            yield from module.named_buffers(prefix)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def train(self, mode: bool = True) -> "PRFNet":
        self.backbone.train(mode)
        self.head.train(mode)
        return self

    def eval(self) -> "PRFNet":
        return self.train(False)

    def astype(self, dtype) -> "PRFNet":
        self.backbone.astype(dtype)
        self.head.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # forward ----------------------------------------------------------------
    def logits(self, O: Tensor, A: Tensor, B: Tensor) -> Tensor:
        f_ref, f_a, f_b = extract_triplet(O, A, B, self.backbone)
        return self.head(f_ref, f_a, f_b)

    __call__ = logits

    def forward_detailed(self, O: Tensor, A: Tensor, B: Tensor):
        """(logits, (F_ref, F_A, F_B), DiffPyramid, FusionState) for inspection."""
        pyramids = extract_triplet(O, A, B, self.backbone)
        z, diffs, state = self.head.forward_detailed(*pyramids)
        return z, pyramids, diffs, state

    def score(self, O, A, B) -> np.ndarray:
        """Probabilities q for a batch of triplets given as arrays or tensors."""
        dtype = self.parameters()[0].dtype
        t = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype)) for x in (O, A, B)]
        return ops.sigmoid(self.logits(*t)).data


def score_triplet(O, A, B, model: PRFNet) -> np.ndarray:
    """Eval-mode q for images shaped (3, H, W) or batches (N, 3, H, W)."""
    single = np.ndim(O.data if isinstance(O, Tensor) else O) == 3
    if single:
        O, A, B = (np.asarray(x)[None] for x in (O, A, B))
    was_training = model.backbone.training
    model.eval()
    try:
        q = model.score(O, A, B)
    finally:
        model.train(was_training)
    return q[0] if single else q
