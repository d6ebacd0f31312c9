"""Manifold entropic metrics for normalizing-flow decoders."""
