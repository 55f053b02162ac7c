"""Seeded sweeps over pipeline stages, NMS settings, robust-cost and scoring choices.

Every sweep runs the real pipeline on oracle scenes and reports AR/AP
averaged over scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .evaluation import EvalReport, SymmetrySet, evaluate
from .pipeline import NMS_SCOPES, PipelineOutput, run_pipeline
from .robust import BarronParams
from .solver import SCORE_MODES, RefineConfig
from .synth import SynthScene, SynthSpec, generate

COST_ALPHAS = (2.0, 1.0, 0.0, -2.0, -5.0, -100.0)
COST_SCALES = tuple(round(0.1 * k, 1) for k in range(1, 11))
NMS_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)


@dataclass
class AblationRow:
    params: dict
    ar: float
    ap: float
    ar_mssd: float
    ar_mspd: float
    ap_mssd: float
    ap_mspd: float
    n_scenes: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def duplicate_heavy_spec(seed: int, **overrides) -> SynthSpec:
    """Every object proposed once per view, plus random decoys."""
    kw = dict(seed=seed, n_views=4, n_objects=3, decoy_rate=0.25, placement_spread=1.5)
    kw.update(overrides)
    return SynthSpec(**kw)


def make_scenes(seeds, **overrides) -> list[SynthScene]:
    return [generate(duplicate_heavy_spec(s, **overrides)) for s in seeds]


def score_output(sc: SynthScene, out: PipelineOutput) -> EvalReport:
    meshes = {o.object_id: o.mesh for o in sc.scene.objects}
    syms = {o.object_id: SymmetrySet(o.symmetries) for o in sc.scene.objects}
    cams = [(c.camera, c.T_CW) for c in sc.scene.cameras]
    return evaluate(out.results, sc.ground_truth(), meshes, syms, cams)


def run_cell(scenes: list[SynthScene], params: dict, cfg: RefineConfig | None = None, stages: str = "full",
             score_mode: str = "average", nms_iou: float | None = None, nms_scope: str | None = None,
             query_kw: dict | None = None, query_fn=None) -> AblationRow:
    """Mean AR/AP over ``scenes`` for one setting.

    ``query_fn(scene)`` overrides the oracle query provider, e.g. to corrupt
    one view per scene.
    """
    reps = []
    for sc in scenes:
        scene = sc.scene
        if nms_iou is not None or nms_scope is not None:
            scene = replace(scene, nms_iou=nms_iou or scene.nms_iou, nms_scope=nms_scope or scene.nms_scope)
        queries = query_fn(sc) if query_fn is not None else sc.oracle(**(query_kw or {}))
        out = run_pipeline(scene, sc.candidates, queries, cfg, score_mode=score_mode, stages=stages)
        reps.append(score_output(sc, out))
    mean = {k: float(np.mean([getattr(r, k) for r in reps]))
            for k in ("ar", "ap", "ar_mssd", "ar_mspd", "ap_mssd", "ap_mspd")}
    return AblationRow(params, n_scenes=len(scenes), **mean)


def ablate_stages(scenes: list[SynthScene], cfg: RefineConfig | None = None) -> list[AblationRow]:
    return [run_cell(scenes, {"stages": s}, cfg, stages=s) for s in ("aggregate", "nms", "full")]


def ablate_nms(scenes: list[SynthScene], thresholds=NMS_THRESHOLDS, scopes=NMS_SCOPES,
               cfg: RefineConfig | None = None) -> list[AblationRow]:
    return [run_cell(scenes, {"nms_iou": t, "nms_scope": s}, cfg, nms_iou=t, nms_scope=s)
            for s in scopes for t in thresholds]


def cost_scenes(seeds, **overrides) -> list[SynthScene]:
    """One candidate per view, coarse enough that the robust loss matters."""
    kw = dict(decoy_rate=0.0, perturb_rot_deg=30.0, perturb_trans_frac=0.15)
    kw.update(overrides)
    return make_scenes(seeds, **kw)


def ablate_cost(scenes: list[SynthScene], alphas=COST_ALPHAS, scales=COST_SCALES, corrupt_fraction: float = 0.2,
                cfg: RefineConfig | None = None, corrupt_mode: str = "decoy") -> list[AblationRow]:
    """Robust-loss grid on queries with a share of cells overwritten.

    ``decoy`` copies descriptors from elsewhere on the object, ``noise`` draws
    random ones.
    """
    base = cfg or RefineConfig()
    rows = []
    for a in alphas:
        for c in scales:
            cell = replace(base, barron=BarronParams(a, c))
            rows.append(run_cell(scenes, {"alpha": a, "c": c}, cell,
                                 query_kw={"corrupt_fraction": corrupt_fraction, "corrupt_mode": corrupt_mode}))
    return rows


def corrupted_view(sc: SynthScene) -> str:
    """The one view per scene whose query map is replaced by noise."""
    cams = sc.scene.cameras
    return cams[sc.spec.seed % len(cams)].view_id


def ablate_scoring(scenes: list[SynthScene], modes=SCORE_MODES, cfg: RefineConfig | None = None) -> list[AblationRow]:
    def query(sc):
        return sc.oracle(corrupt_views=(corrupted_view(sc),))

    return [run_cell(scenes, {"score_mode": m}, cfg, score_mode=m, query_fn=query) for m in modes]


def format_table(rows: list[AblationRow]) -> str:
    keys = list(rows[0].params) if rows else []
    head = keys + ["AR", "AP", "AR_mssd", "AR_mspd", "AP_mssd", "AP_mspd"]
    body = [[str(r.params[k]) for k in keys] + [f"{v:.4f}" for v in
            (r.ar, r.ap, r.ar_mssd, r.ar_mspd, r.ap_mssd, r.ap_mspd)] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(x.rjust(w) for x, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
