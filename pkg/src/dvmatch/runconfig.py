"""Flat key=value run configuration with a strict validated schema."""

from __future__ import annotations

import difflib

from .matching import LossWeights
from .projection import DEFAULT_IMAGE_SIZE, FeatureBlend
from .solver import SolverConfig

__all__ = ["ConfigError", "SCHEMA", "parse_config_text", "load_config", "build_solver_config"]


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("none", "auto") else int(text)


# key -> (parser, default, description)
SCHEMA = {
    "outer_iters": (int, 30, "correspondence refresh iterations"),
    "inner_iters": (int, 25, "descent steps per refresh"),
    "step_size": (float, 0.05, "descent trust step in parameter space"),
    "step_decay": (float, 0.97, "per-refresh step multiplier"),
    "lambda_deform": (float, 0.05, "deformation (chamfer) weight"),
    "lambda_arap": (float, 0.005, "rigidity weight"),
    "lambda_smooth": (float, 0.5, "correspondence smoothness weight"),
    "lambda_geo": (float, 0.02, "geodesic similarity weight"),
    "top_n": (int, 10, "kept entries per soft-correspondence row"),
    "temperature": (float, 0.07, "softmax temperature"),
    "mode": (str, "full", "full | partial"),
    "fd_check": (_bool, False, "validate gradients against finite differences"),
    "seed": (int, 0, "sampling seed"),
    "node_count": (_opt_int, None, "deformation nodes (default: half the points)"),
    "k_node": (int, 6, "node adjacency neighbor count"),
    "k_skin": (int, 4, "skinning neighbor count"),
    "geo_neighbors": (int, 10, "neighbors in the geodesic similarity loss"),
    "grad_smoothing": (float, 50.0, "node-graph smoothing of descent directions"),
    "rigid_gate": (float, 0.02, "rigid-fit gain gating non-rigid refinement"),
    "armijo": (float, 0.3, "sufficient-decrease coefficient"),
    "fit_sweeps": (int, 3, "local-global fitting sweeps per refresh"),
    "visual_weight": (float, 1.0, "visual feature block blend weight"),
    "encoding_weight": (float, 1.0, "positional encoding block blend weight"),
    "image_h": (int, DEFAULT_IMAGE_SIZE, "projection image height"),
    "image_w": (int, DEFAULT_IMAGE_SIZE, "projection image width"),
    "laplacian_k": (int, 8, "kNN graph size for geodesics"),
    "heat_time_multiplier": (float, 1.0, "heat diffusion time scale"),
    "compute_geodesics": (_bool, True, "compute the source geodesic matrix when needed"),
}


def parse_config_text(text, origin="<config>"):
    """key=value lines into a validated dict; unknown keys get a suggestion."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            hint = difflib.get_close_matches(key, SCHEMA, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}{suffix}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val.strip())
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}")
    full = {key: default for key, (_, default, _) in SCHEMA.items()}
    full.update(values)
    return full


def load_config(path=None, overrides=None):
    """Config file (optional) plus programmatic overrides, validated."""
    if path is not None:
        values = parse_config_text(open(path).read(), origin=str(path))
    else:
        values = {key: default for key, (_, default, _) in SCHEMA.items()}
    for key, val in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown override {key!r}")
        if val is not None:
            values[key] = val
    return values


def build_solver_config(values) -> SolverConfig:
    return SolverConfig(
        outer_iters=values["outer_iters"],
        inner_iters=values["inner_iters"],
        step_size=values["step_size"],
        step_decay=values["step_decay"],
        weights=LossWeights(deform=values["lambda_deform"], arap=values["lambda_arap"],
                            smooth=values["lambda_smooth"], geo=values["lambda_geo"]),
        top_n=values["top_n"],
        temperature=values["temperature"],
        mode=values["mode"],
        fd_check=values["fd_check"],
        seed=values["seed"],
        node_count=values["node_count"],
        k_node=values["k_node"],
        k_skin=values["k_skin"],
        geo_neighbors=values["geo_neighbors"],
        blend=FeatureBlend(visual_weight=values["visual_weight"],
                           encoding_weight=values["encoding_weight"]),
        grad_smoothing=values["grad_smoothing"],
        rigid_gate=values["rigid_gate"],
        armijo=values["armijo"],
        fit_sweeps=values["fit_sweeps"],
    )
