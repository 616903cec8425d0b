"""Aggregate of shared flow, base prior, and registered knowledge heads."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .flows import FlowStack, image_flow, vector_flow
from .heads import BasePrior, KnowledgeHead


class TzkModel:
    def __init__(self, flow: FlowStack, base: BasePrior, z_shape, dtype=np.float32):
        self.flow = flow
        self.base = base
        self.z_shape = tuple(z_shape)
        self.z_dim = int(np.prod(z_shape))
        self.dtype = dtype
        self.heads: dict[str, KnowledgeHead] = {}

    def add_head(self, head: KnowledgeHead) -> KnowledgeHead:
        """Register a knowledge type; allowed between training steps only."""
        if head.id in self.heads:
            raise ContractViolation(f"duplicate head id {head.id!r}")
        if head.z_shape != self.z_shape:
            raise ContractViolation(f"head {head.id!r} latent shape {head.z_shape} != model {self.z_shape}")
        self.heads[head.id] = head
        return head

    def head(self, head_id: str) -> KnowledgeHead:
        if head_id not in self.heads:
            raise ContractViolation(f"unknown head id {head_id!r}")
        return self.heads[head_id]

    def named_parameters(self) -> dict:
        params = {}
        for name, t in self.flow.named_params():
            params[name] = t
        for name, t in self.base.named_params():
            params[name] = t
        for head in self.heads.values():
            for name, t in head.named_params():
                params[name] = t
        return params

    def params_with_prefix(self, prefix: str):
        return [t for name, t in self.named_parameters().items() if name.startswith(prefix)]

    def disc_group_prefixes(self, head_id: str):
        return [f"head/{head_id}/disc_t", f"head/{head_id}/disc_c"]

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None


def build_model(z_shape, flow_steps, rng, tile=16, head_specs=(), c_dim=2,
                mlp_hidden=70, mlp_depth=4, private_layers=4, dtype=np.float32) -> TzkModel:
    """Construct the full model; head_specs is an iterable of (id, c_dim or None)."""
    c, h, w = z_shape
    if h == 1 and w == 1:
        flow = vector_flow(c, flow_steps, rng, dtype)
    else:
        flow = image_flow(z_shape, flow_steps, tile, rng, dtype)
    base = BasePrior(int(np.prod(z_shape)), dtype)
    model = TzkModel(flow, base, z_shape, dtype)
    for spec in head_specs:
        head_id, head_c_dim = spec if isinstance(spec, tuple) else (spec, None)
        model.add_head(KnowledgeHead(head_id, head_c_dim or c_dim, z_shape, rng,
                                     hidden=mlp_hidden, depth=mlp_depth,
                                     private_layers=private_layers, dtype=dtype))
    return model
