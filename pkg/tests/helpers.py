"""Shared fixtures-by-function for the test suite."""

import torch

from manifold_metrics.flows import FlowModel


def perturbed_flow(dim=4, blocks=2, amplitude=0.2, seed=0, hidden=(16, 16)):
    """A small flow pushed away from the identity by seeded parameter noise."""
    model = FlowModel.build(dim, blocks=blocks, hidden=hidden, seed=seed)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(amplitude * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model
