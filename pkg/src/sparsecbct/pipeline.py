"""Stage implementations behind the command line.

Every stage reads its inputs from and writes its outputs to the run directory,
so running the stages one by one and running the whole pipeline execute the
same code on the same bytes. Layout of a run directory::

    manifest.json             artifact -> sha256, stage, config hash
    config.yaml               resolved configuration of the run
    phantom/                  gt_volume, phantom.json
    project/                  sparse, dense_gt, pairs_gt
    naf/                      naf.ckpt, loss.csv
    synthesize/               synth (dense angles), pairs_synth (training angles)
    decouple/                 sino_init, dr_init
    refiner_sino/, refiner_dr/ refiner.ckpt, history.csv
    refine/                   sino_refined, dr_refined
    reconstruct/              v_sin, v_dr, fdk_sparse, fdk_synth, fdk_dense_gt
    fuse/                     v_final
    evaluate/                 metrics.json, projection_metrics.json, *.png
    sweep/                    omega.csv, views_m.csv

Dense angles: the refinement set holds ``M`` uniform angles and the refiner
training set the ``M`` angles halfway between them, so the two are disjoint
halves of a ``2M`` grid.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import decouple, diffusion, fdk, io, metrics, naf, phantom, projector
from .config import config_hash, dump_config, sparse_views
from .data import ProjectionSet, Volume3D
from .geometry import ConeBeamGeometry, uniform_angles

log = logging.getLogger(__name__)

STAGES = (
    "phantom", "project", "train-naf", "synthesize", "decouple", "train-refiner-sino", "train-refiner-dr",
    "refine-sino", "refine-dr", "reconstruct", "fuse", "evaluate",
)


class MissingArtifact(RuntimeError):
    pass


class HashMismatch(RuntimeError):
    pass


# --------------------------------------------------------------------------- context


@dataclass
class Run:
    cfg: dict
    out: Path
    force: bool = False
    workers: int = 1
    hash: str = field(init=False)

    def __post_init__(self):
        self.out = Path(self.out)
        self.hash = config_hash(self.cfg)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    def path(self, rel: str) -> Path:
        return self.out / rel

    def lock(self) -> FileLock:
        return FileLock(str(self.out / ".lock"))

    # manifest ------------------------------------------------------------
    def _manifest_path(self):
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        p = self._manifest_path()
        return json.loads(p.read_text()) if p.exists() else {"artifacts": {}}

    def record(self, stage: str, *files):
        man = self.manifest()
        for f in files:
            f = Path(f)
            rel = str(f.relative_to(self.out))
            man["artifacts"][rel] = {"sha256": _sha256(f), "stage": stage, "config_hash": self.hash}
        man["artifacts"] = dict(sorted(man["artifacts"].items()))
        self._manifest_path().write_text(json.dumps(man, indent=2) + "\n")
        (self.out / "config.yaml").write_text(dump_config(self.cfg))

    # artifact access with prerequisite and provenance checks ---------------
    def require(self, rel: str, producer: str) -> Path:
        p = self.path(rel)
        side = p.with_suffix(".json") if p.suffix == ".raw" else None
        if not p.exists() or (side is not None and not side.exists()):
            raise MissingArtifact(f"missing {p}; run `sparsecbct {producer}` first")
        if side is not None:
            h = json.loads(side.read_text()).get("config_hash")
        else:
            h = self.manifest()["artifacts"].get(rel, {}).get("config_hash")
        if h != self.hash and not self.force:
            raise HashMismatch(
                f"{p} was produced with config hash {str(h)[:12]}, current config is {self.hash[:12]}; "
                "rerun the producing stage or pass --force"
            )
        return p

    def stage_done(self, stage: str) -> bool:
        """True when every output of ``stage`` is recorded under the current hash.

        Outputs recorded under another hash, or changed on disk since, raise
        unless --force is given, in which case the stage is recomputed.
        """
        arts = {k: v for k, v in self.manifest()["artifacts"].items() if v["stage"] == stage}
        if not arts:
            return False
        stale = [k for k, v in arts.items() if v["config_hash"] != self.hash]
        if stale:
            if self.force:
                return False
            raise HashMismatch(
                f"stage {stage} has outputs from another configuration ({stale[0]}); "
                "use a fresh --output directory or pass --force to recompute"
            )
        for rel, v in arts.items():
            p = self.path(rel)
            if not p.exists() or _sha256(p) != v["sha256"]:
                if self.force:
                    return False
                raise HashMismatch(f"{p} is missing or was modified since it was recorded; pass --force to recompute")
        return True


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _both(raw_path: Path):
    return raw_path, raw_path.with_suffix(".json")


# --------------------------------------------------------------------------- geometry helpers


def base_geometry(cfg: dict, angles) -> ConeBeamGeometry:
    return ConeBeamGeometry(**cfg["geometry"], angles=angles)


def dense_angles(cfg: dict):
    """``(refine_angles, train_angles)``: the two interleaved halves of a 2M grid."""
    m = int(cfg["dense"]["views"])
    return uniform_angles(m), uniform_angles(m, offset=math.pi / m)


def sparse_angle_indices(cfg: dict) -> np.ndarray | None:
    """Indices into the dense refinement angles when sparse views are a subset of them."""
    if not cfg["sparse"]["subset_of_dense"]:
        return None
    n, m = sparse_views(cfg), int(cfg["dense"]["views"])
    return (np.arange(n) * m) // n


def sparse_angles(cfg: dict):
    idx = sparse_angle_indices(cfg)
    if idx is None:
        return uniform_angles(sparse_views(cfg))
    return dense_angles(cfg)[0][idx]


def _recon_grid(vol: Volume3D) -> fdk.ReconGrid:
    return fdk.ReconGrid.like(vol)


def _fdk(run: Run, ps: ProjectionSet, grid) -> Volume3D:
    c = run.cfg["fdk"]
    spec = fdk.FilterSpec(c["filter"], int(c["pad_factor"]))
    return fdk.fdk_reconstruct(ps, grid=grid, spec=spec, interpolation=c["interpolation"],
                               constant_backprojection_weight=bool(c["constant_backprojection_weight"]))


def _dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


# --------------------------------------------------------------------------- stages


def stage_phantom(run: Run):
    cfg = run.cfg
    if cfg["phantom"]["kind"] == "volume":
        vol = io.load_volume(cfg["phantom"]["path"])
        desc = {"kind": "volume", "source": cfg["phantom"]["path"]}
    else:
        ph = phantom.shepp_logan_like(cfg["phantom"]["scale_mm"], cfg["phantom"]["mu"])
        vol = phantom.voxelize(ph, cfg["volume"]["dims"], cfg["volume"]["spacing"])
        desc = ph.to_dict()
    raw = io.save_volume(run.path("phantom/gt_volume"), vol, run.hash)
    desc_path = run.path("phantom/phantom.json")
    desc_path.write_text(json.dumps({"config_hash": run.hash, "phantom": desc}, indent=2) + "\n")
    run.record("phantom", *_both(raw), desc_path)


def stage_project(run: Run):
    vol = io.load_volume(run.require("phantom/gt_volume.raw", "phantom"))
    n_sample = int(run.cfg["projection"]["n_sample"])
    refine_a, train_a = dense_angles(run.cfg)
    dense = projector.project_all(vol, base_geometry(run.cfg, refine_a), n_sample)
    pairs = projector.project_all(vol, base_geometry(run.cfg, train_a), n_sample)
    idx = sparse_angle_indices(run.cfg)
    if idx is None:
        sparse = projector.project_all(vol, base_geometry(run.cfg, sparse_angles(run.cfg)), n_sample)
    else:
        sparse = dense.subset(idx)
    files = []
    for name, ps in (("sparse", sparse), ("dense_gt", dense), ("pairs_gt", pairs)):
        files += _both(io.save_projections(run.path(f"project/{name}"), ps, run.hash))
    run.record("project", *files)


def _naf_configs(run: Run):
    c = run.cfg["naf"]
    enc = naf.HashEncoderConfig(c["levels"], c["table_size_log2"], c["features_per_level"], c["base_resolution"],
                                c["growth_factor"])
    train = naf.NafTrainConfig(int(c["iters"]), int(c["rays_per_batch"]), float(c["lr_tables"]),
                               float(c["lr_decoder"]), int(c["n_sample"]), run.seed, float(c["adam_eps"]),
                               float(c["lr_final_factor"]))
    return enc, train


def stage_train_naf(run: Run):
    vol = io.load_volume(run.require("phantom/gt_volume.raw", "phantom"))
    sparse = io.load_projections(run.require("project/sparse.raw", "project"))
    enc, tcfg = _naf_configs(run)
    c = run.cfg["naf"]
    model = naf.NafModel(vol.bounds, enc, c["width"], c["depth"], c["out_scale"], seed=run.seed)
    t0 = time.time()

    def progress(it, loss):
        if it % 100 == 0 or it == tcfg.iters - 1:
            log.info("naf iter %d/%d loss %.4e (%.0fs)", it + 1, tcfg.iters, loss, time.time() - t0)

    history = naf.train_naf(model, sparse, tcfg, progress)
    ckpt = naf.save_naf(run.path("naf/naf.ckpt"), model, config_hash=run.hash, seed=run.seed)
    loss_csv = run.path("naf/loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(history))
    run.record("train-naf", ckpt, loss_csv)


def _load_naf(run: Run):
    model, meta = naf.load_naf(run.require("naf/naf.ckpt", "train-naf"))
    if meta.get("config_hash") != run.hash and not run.force:
        raise HashMismatch("naf/naf.ckpt belongs to another configuration; rerun train-naf or pass --force")
    return model


def synthesize_dense(run: Run, model, angles) -> ProjectionSet:
    c = run.cfg["naf"]
    return naf.synthesize_projections(model, base_geometry(run.cfg, angles), int(c["n_sample"]),
                                      _dtype(c["render_dtype"]))


def stage_synthesize(run: Run):
    model = _load_naf(run)
    refine_a, train_a = dense_angles(run.cfg)
    files = []
    for name, angles in (("synth", refine_a), ("pairs_synth", train_a)):
        ps = synthesize_dense(run, model, angles)
        files += _both(io.save_projections(run.path(f"synthesize/{name}"), ps, run.hash))
    run.record("synthesize", *files)


def stage_decouple(run: Run):
    synth = io.load_projections(run.require("synthesize/synth.raw", "synthesize"))
    a = io.save_stack(run.path("decouple/sino_init"), decouple.to_sinograms(synth), run.hash)
    b = io.save_stack(run.path("decouple/dr_init"), decouple.to_dr(synth), run.hash)
    run.record("decouple", *_both(a), *_both(b))


def _domain_images(ps: ProjectionSet, domain: str) -> np.ndarray:
    return decouple.to_sinograms(ps).data if domain == "sino" else decouple.to_dr(ps).data


def _refiner_cfg(run: Run, domain: str):
    c = run.cfg["diffusion"][domain]
    tcfg = diffusion.RefinerTrainConfig(int(c["epochs"]), int(c["batch"]), float(c["lr"]), float(c["noise_weight"]),
                                        None if c["patch"] is None else int(c["patch"]), run.seed)
    return c, tcfg


def stage_train_refiner(run: Run, domain: str):
    gt = io.load_projections(run.require("project/pairs_gt.raw", "project"))
    syn = io.load_projections(run.require("synthesize/pairs_synth.raw", "synthesize"))
    x_init, x_star = _domain_images(syn, domain), _domain_images(gt, domain)
    c, tcfg = _refiner_cfg(run, domain)
    mean, std = float(x_init.mean()), float(x_init.std())
    model = diffusion.RefinerModel(domain, diffusion.DiffusionSchedule.default(int(c["steps"])), int(c["base_width"]),
                                   mean, std, seed=run.seed)
    t0 = time.time()

    def progress(epoch, last):
        log.info("%s refiner epoch %d/%d L_res %.3e L_noise %.3e (%.0fs)", domain, epoch + 1, tcfg.epochs, *last,
                 time.time() - t0)

    history = diffusion.train_refiner(model, model.normalize(x_init), model.normalize(x_star), tcfg, progress)
    ckpt = diffusion.save_refiner(run.path(f"refiner_{domain}/refiner.ckpt"), model, config_hash=run.hash,
                                  seed=run.seed, train=diffusion.train_config_dict(tcfg))
    hist = run.path(f"refiner_{domain}/history.csv")
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "loss_res", "loss_noise"])
        w.writerows((i, repr(a), repr(b)) for i, (a, b) in enumerate(history))
    run.record(f"train-refiner-{domain}", ckpt, hist)


def _load_refiner(run: Run, domain: str):
    model, meta = diffusion.load_refiner(run.require(f"refiner_{domain}/refiner.ckpt", f"train-refiner --domain {domain}"),
                                         expect_domain=domain)
    if meta.get("config_hash") != run.hash and not run.force:
        raise HashMismatch(f"refiner_{domain}/refiner.ckpt belongs to another configuration; pass --force to use it")
    return model


def refine_domain(run: Run, model, stack, domain: str):
    c = run.cfg["diffusion"][domain]
    t0 = time.time()

    def progress(k):
        if k % 20 == 0:
            log.info("refining %s image %d/%d (%.0fs)", domain, k + 1, len(stack), time.time() - t0)

    return diffusion.refine_stack(model, stack, run.seed, bool(c["include_final_noise_term"]),
                                  _dtype(c["inference_dtype"]), progress=progress)


def stage_refine(run: Run, domain: str):
    model = _load_refiner(run, domain)
    name = "sino_init" if domain == "sino" else "dr_init"
    stack = io.load_stack(run.require(f"decouple/{name}.raw", "decouple"),
                          expect="sinogram_stack" if domain == "sino" else "dr_stack")
    refined = refine_domain(run, model, stack, domain)
    raw = io.save_stack(run.path(f"refine/{domain}_refined"), refined, run.hash)
    run.record(f"refine-{domain}", *_both(raw))


RECON_PATHS = ("sin", "dr", "baselines", "both")


def stage_reconstruct(run: Run, path: str = "both"):
    """``sin``/``dr`` reconstruct one refined path; ``both`` does both plus the FDK baselines."""
    if path not in RECON_PATHS:
        raise ValueError(f"path must be one of {RECON_PATHS}")
    gt = io.load_volume(run.require("phantom/gt_volume.raw", "phantom"))
    grid = _recon_grid(gt)
    jobs = []
    if path in ("sin", "both"):
        st = io.load_stack(run.require("refine/sino_refined.raw", "refine --domain sino"), expect="sinogram_stack")
        jobs.append(("v_sin", decouple.from_sinograms(st)))
    if path in ("dr", "both"):
        st = io.load_stack(run.require("refine/dr_refined.raw", "refine --domain dr"), expect="dr_stack")
        jobs.append(("v_dr", decouple.from_dr(st)))
    if path in ("baselines", "both"):
        jobs.append(("fdk_sparse", io.load_projections(run.require("project/sparse.raw", "project"))))
        jobs.append(("fdk_synth", io.load_projections(run.require("synthesize/synth.raw", "synthesize"))))
        jobs.append(("fdk_dense_gt", io.load_projections(run.require("project/dense_gt.raw", "project"))))
    files = []
    for name, ps in jobs:
        files += _both(io.save_volume(run.path(f"reconstruct/{name}"), _fdk(run, ps, grid), run.hash))
    run.record("reconstruct", *files)


def stage_fuse(run: Run):
    v_sin = io.load_volume(run.require("reconstruct/v_sin.raw", "reconstruct --path sin"))
    v_dr = io.load_volume(run.require("reconstruct/v_dr.raw", "reconstruct --path dr"))
    omega = float(run.cfg["fusion"]["omega"])
    raw = io.save_volume(run.path("fuse/v_final"), metrics.fuse(v_sin, v_dr, omega), run.hash, omega=omega)
    run.record("fuse", *_both(raw))


EVAL_VOLUMES = (
    ("fdk_sparse", "reconstruct/fdk_sparse.raw", "reconstruct"),
    ("fdk_synth", "reconstruct/fdk_synth.raw", "reconstruct"),
    ("fdk_dense_gt", "reconstruct/fdk_dense_gt.raw", "reconstruct"),
    ("v_sin", "reconstruct/v_sin.raw", "reconstruct"),
    ("v_dr", "reconstruct/v_dr.raw", "reconstruct"),
    ("v_final", "fuse/v_final.raw", "fuse"),
)


def stage_evaluate(run: Run):
    gt = io.load_volume(run.require("phantom/gt_volume.raw", "phantom"))
    views = {"fdk_sparse": sparse_views(run.cfg)}
    records, files = [], []
    for stage, rel, producer in EVAL_VOLUMES:
        if not run.path(rel).exists():
            continue
        vol = io.load_volume(run.require(rel, producer))
        m = metrics.evaluate(vol, gt)
        records.append(metrics.metrics_record(m, dataset=run.cfg["dataset"],
                                              views=views.get(stage, int(run.cfg["dense"]["views"])), stage=stage,
                                              config_hash=run.hash, seed=run.seed))
        png = io.save_png(run.path(f"evaluate/{stage}_axial.png"), vol.values[:, :, vol.dims[2] // 2].T)
        files.append(png)
    if not records:
        raise MissingArtifact("no reconstructed volumes found; run `sparsecbct reconstruct` first")
    out = run.path("evaluate/metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_json(out, records)
    files.append(out)

    proj = {}
    dense_gt = run.path("project/dense_gt.raw")
    if dense_gt.exists():
        ref = io.load_projections(run.require("project/dense_gt.raw", "project")).data
        for name, rel in (("naf_synth", "synthesize/synth.raw"), ("sino_refined", "refine/sino_refined.raw"),
                          ("dr_refined", "refine/dr_refined.raw")):
            if not run.path(rel).exists():
                continue
            p = run.require(rel, "synthesize")
            data = io.load_projections(p).data if name == "naf_synth" else _stack_as_projections(p)
            proj[name] = float(np.mean((data - ref) ** 2))
    pm = run.path("evaluate/projection_metrics.json")
    pm.write_text(json.dumps({"config_hash": run.hash, "mse_vs_dense_gt": proj}, indent=2) + "\n")
    files.append(pm)
    run.record("evaluate", *files)
    return records


def _stack_as_projections(path) -> np.ndarray:
    st = io.load_stack(path)
    ps = decouple.from_sinograms(st) if isinstance(st, decouple.SinogramStack) else decouple.from_dr(st)
    return ps.data


# --------------------------------------------------------------------------- drivers


STAGE_FUNCS = {
    "phantom": stage_phantom,
    "project": stage_project,
    "train-naf": stage_train_naf,
    "synthesize": stage_synthesize,
    "decouple": stage_decouple,
    "train-refiner-sino": lambda r: stage_train_refiner(r, "sino"),
    "train-refiner-dr": lambda r: stage_train_refiner(r, "dr"),
    "refine-sino": lambda r: stage_refine(r, "sino"),
    "refine-dr": lambda r: stage_refine(r, "dr"),
    "reconstruct": lambda r: stage_reconstruct(r, "both"),
    "fuse": stage_fuse,
    "evaluate": stage_evaluate,
}


def run_pipeline(run: Run, stages=STAGES):
    """All stages in order; stages already recorded under the current hash are reused."""
    for name in stages:
        if run.stage_done(name):
            log.info("stage %s: reusing recorded outputs", name)
            continue
        log.info("stage %s: running", name)
        t0 = time.time()
        STAGE_FUNCS[name](run)
        log.info("stage %s: done in %.1fs", name, time.time() - t0)


OMEGA_SWEEP = tuple(round(0.1 * k, 1) for k in range(1, 10))
VIEWS_M_SWEEP = (240, 480, 540, 640, 720, 800, 880, 960, 1200)


def sweep_omega(run: Run, values=OMEGA_SWEEP):
    """Fuse the two recorded path volumes at every ``omega`` and score each."""
    gt = io.load_volume(run.require("phantom/gt_volume.raw", "phantom"))
    v_sin = io.load_volume(run.require("reconstruct/v_sin.raw", "reconstruct --path sin"))
    v_dr = io.load_volume(run.require("reconstruct/v_dr.raw", "reconstruct --path dr"))
    rows = []
    for w in values:
        m = metrics.evaluate(metrics.fuse(v_sin, v_dr, float(w)), gt)
        rows.append({"omega": float(w), "psnr_db": m["psnr_db"], "ssim": m["ssim"], "config_hash": run.hash})
    return _write_sweep(run, "omega", rows)


def sweep_views_m(run: Run, values=VIEWS_M_SWEEP):
    """Re-run synthesis, decoupling, refinement, reconstruction and fusion for every ``M``.

    The NAF and both refiners trained for the configured ``M`` are reused.
    """
    gt = io.load_volume(run.require("phantom/gt_volume.raw", "phantom"))
    grid = _recon_grid(gt)
    model = _load_naf(run)
    sino_model, dr_model = _load_refiner(run, "sino"), _load_refiner(run, "dr")
    omega = float(run.cfg["fusion"]["omega"])
    rows = []
    for m in values:
        m = int(m)
        if m < sparse_views(run.cfg):
            raise ValueError(f"M={m} is below the sparse view count")
        synth = synthesize_dense(run, model, uniform_angles(m))
        v_synth = _fdk(run, synth, grid)
        v_sin = _fdk(run, decouple.from_sinograms(refine_domain(run, sino_model, decouple.to_sinograms(synth), "sino")),
                     grid)
        v_dr = _fdk(run, decouple.from_dr(refine_domain(run, dr_model, decouple.to_dr(synth), "dr")), grid)
        fused = metrics.evaluate(metrics.fuse(v_sin, v_dr, omega), gt)
        base = metrics.evaluate(v_synth, gt)
        rows.append({"views_m": m, "psnr_db": fused["psnr_db"], "ssim": fused["ssim"],
                     "fdk_synth_psnr_db": base["psnr_db"], "fdk_synth_ssim": base["ssim"], "config_hash": run.hash})
        log.info("M=%d: fused PSNR %.2f dB", m, fused["psnr_db"])
    return _write_sweep(run, "views_m", rows)


def _write_sweep(run: Run, parameter: str, rows):
    out = run.path(f"sweep/{parameter}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_sweep_csv(out, parameter, rows)
    run.record(f"sweep-{parameter}", out)
    best = max(rows, key=lambda r: r["psnr_db"])
    log.info("sweep %s: best %s = %s (%.2f dB)", parameter, parameter, best[parameter], best["psnr_db"])
    return rows
