"""The full model: backbone plus the alignment modules, with named parameter groups."""

from __future__ import annotations

import hashlib

import torch
from torch import nn

from .backbone import Backbone
from .bitransformer import BiTransformer, DownProjection, QueryBank
from .generation import Denoiser
from .layers import init_parameters
from .numerics import Rng
from .retrieval import FusionHead

# attribute -> parameter group
GROUP_OF = {
    "backbone": "backbone",
    "down": "downproj",
    "bit": "bitransformer",
    "queries": "queries",
    "fusion": "fusion",
    "denoiser": "denoiser",
}
GROUPS = tuple(GROUP_OF.values())
ALIGNMENT_GROUPS = tuple(g for g in GROUPS if g != "backbone")


class OmniBridge(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        d_bit = cfg.bitransformer.d_bit
        self.backbone = Backbone(cfg.backbone)
        self.down = DownProjection(cfg.backbone.d_emb, d_bit)
        self.bit = BiTransformer(cfg.bitransformer)
        self.queries = QueryBank(cfg.bitransformer)
        self.fusion = FusionHead(d_bit, cfg.retrieval)
        self.denoiser = Denoiser(cfg.generation, d_bit, cfg.bitransformer.n_q_gen)

    def group_parameters(self, groups) -> dict[str, nn.Parameter]:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        return {name: p for name, p in self.named_parameters() if group_of(name) in groups}


def group_of(param_name: str) -> str:
    return GROUP_OF[param_name.split(".", 1)[0]]


def build_model(cfg, rng: Rng | None = None) -> OmniBridge:
    """Construct and initialise every parameter from the root seed (or ``rng``)."""
    model = OmniBridge(cfg)
    rng = Rng(cfg.seeds.root).child("init") if rng is None else rng
    init_parameters(model, rng)
    return model


def parameter_checksum(params: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def group_checksums(model: OmniBridge) -> dict[str, str]:
    return {g: parameter_checksum(model.group_parameters([g])) for g in GROUPS}
