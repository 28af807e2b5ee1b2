"""Orchestration behind the CLI subcommands.  Each ``run_*`` writes its
artifacts into ``out`` and returns the JSON payload it wrote."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from .bloch import BandStructure, corner_points, dense_k_grid, edge_bands, find_band_edge, solve_bands, spectral_gap
from .config import RunConfig
from .effmass import certify_hypotheses, effective_mass
from .errors import GaplessEdgeError, HypothesisError
from .homogenized import HomogenizedProblem, fit_box, solve_homogenized
from .multiscale import build_expansion
from .validator import convergence_study, direct_problem

log = logging.getLogger(__name__)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def write_json(path, payload: dict) -> dict:
    payload = _clean(payload)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def _band_k_points(cfg: RunConfig) -> np.ndarray:
    """Uniform grid plus the zone corners, where band extrema of real V sit."""
    k = np.concatenate([dense_k_grid(cfg.dimension, cfg.n_k), corner_points(cfg.dimension)])
    return np.unique(k, axis=0)


def run_bands(cfg: RunConfig, out) -> dict:
    """Band CSV over a uniform k-grid and the open gaps between sampled bands."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bands: BandStructure = solve_bands(cfg.periodic, _band_k_points(cfg), cfg.n_bands, cfg.pw_cutoff)
    bands.to_csv(out / "bands.csv")
    gaps = bands.spectral_gaps()
    payload = {
        "n_k": len(bands.k_points),
        "n_bands": bands.n_bands,
        "pw_cutoff": bands.pw_cutoff,
        "k_resolution": bands.k_resolution,
        "band_intervals": bands.band_intervals(),
        "gaps": [list(g) for g in gaps],
        "gapless": not gaps,
    }
    write_json(out / "gap.json", payload)
    if not gaps:
        raise GaplessEdgeError(f"no spectral gap among the lowest {bands.n_bands} sampled bands")
    return payload


def _edge(cfg: RunConfig):
    return find_band_edge(cfg.periodic, cfg.band, cfg.k, cfg.pw_cutoff, tol_grad=cfg.tol_grad)


def run_effmass(cfg: RunConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    edge = _edge(cfg)
    report = effective_mass(edge, cfg.hessian_step)
    payload = {"edge": edge.to_json_dict(), "effective_mass": report.to_json_dict()}
    write_json(out / "effmass.json", payload)
    report.inner.require_definite()
    return payload


def _homog_problem(cfg: RunConfig, A, scheme: str) -> HomogenizedProblem:
    return HomogenizedProblem(A, cfg.require_defect(), cfg.L_box, cfg.h_y, scheme)


def run_homog(cfg: RunConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    edge = _edge(cfg)
    A = effective_mass(edge, cfg.hessian_step).inner
    A.require_definite()
    problem = _homog_problem(cfg, A, cfg.homog_scheme)
    pairs = solve_homogenized(problem, cfg.n_eigs)
    hyp = certify_hypotheses(edge, A, [p.e for p in pairs if p.discrete], cfg.tol_grad)
    payload = {
        "A": A.A,
        "scheme": problem.scheme,
        "L_box": problem.L_box,
        "h_y": problem.h_y,
        "eigenpairs": [p.to_json_dict() for p in pairs],
        "hypotheses": hyp.to_json_dict(),
    }
    write_json(out / "homog.json", payload)
    pairs[0].to_csv(out / "envelope.csv")
    if not hyp.H3:
        raise HypothesisError("H3", "unverified: no homogenized eigenvalue with sgn(A) e < 0")
    return payload


def run_defect(cfg: RunConfig, out) -> dict:
    """Edge, A, homogenized pair, expansion to order N and the direct eps-study."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.check_eps()
    edge = _edge(cfg)
    mass = effective_mass(edge, cfg.hessian_step)
    A = mass.inner
    hyp = certify_hypotheses(edge, A, None, cfg.tol_grad)
    if not hyp.H2c:
        write_json(out / "hypotheses.json", hyp.to_json_dict())
        raise HypothesisError("H2(c)", f"A is not sign definite (eigenvalues {A.eigenvalues.tolist()})")
    problem = _homog_problem(cfg, A, "spectral")
    pairs = solve_homogenized(problem, cfg.n_eigs, warn_boundary=cfg.L_box is not None)
    budget = cfg.memory_budget_mb * 1024**2
    if pairs[0].discrete:
        # refuse oversized direct solves before the expensive steps
        for ep in cfg.eps:
            direct_problem(cfg.periodic, cfg.defect, A.A, pairs[0].e, ep, cfg.c_dom, cfg.direct_pw_cutoff, cfg.n_fast, cfg.direct_scheme, budget).check_budget()
    if cfg.L_box is None and pairs[0].discrete:
        # the direct comparison samples the envelope pointwise: no truncation jump
        pairs = fit_box(pairs[0], cfg.n_eigs)
    hyp = certify_hypotheses(edge, A, [p.e for p in pairs if p.discrete], cfg.tol_grad)
    write_json(out / "hypotheses.json", hyp.to_json_dict())
    if not hyp.H3:
        raise HypothesisError("H3", f"unverified: no homogenized eigenvalue with sgn(A) e < 0 (lowest e = {pairs[0].e:.10g})")
    gap = spectral_gap(edge_bands(cfg.periodic, edge.band, pw_cutoff=cfg.pw_cutoff), edge)
    state = build_expansion(edge, pairs[0], cfg.order)
    write_json(out / "expansion.json", state.to_json_dict())
    report = convergence_study(
        state,
        gap,
        cfg.eps,
        cfg.order,
        c_dom=cfg.c_dom,
        pw_cutoff=cfg.direct_pw_cutoff,
        n_fast=cfg.n_fast,
        scheme=cfg.direct_scheme,
        memory_budget=budget,
    )
    report.to_csv(out / "convergence.csv")
    payload = {
        "edge": {"band": edge.band, "k": list(edge.k), "E_star": edge.energy},
        "gap": list(gap),
        "effective_mass": mass.to_json_dict(),
        "hypotheses": hyp.to_json_dict(),
        "expansion": state.to_json_dict(),
        "convergence": report.to_json_dict(),
    }
    write_json(out / "convergence.json", report.to_json_dict())
    write_json(out / "defect.json", payload)
    return payload
