"""``sitewave`` command line: materials, scene checks, reconstruction, tracing, validation, full runs.

Exit codes: 0 success, 1 input error, 2 physics/geometry refusal, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .materials import MaterialClass, eval_permittivity, fresnel, load_material_table, reflected_power_fraction
from .recon import (
    NonWatertightMeshError,
    ReconConfig,
    build_rt_model,
    read_point_cloud,
    read_votes,
    write_point_cloud,
    write_votes,
)
from .scene import MeshError, mesh_ok_for_tracing, validate_manifold
from .sceneio import SceneLoadError, load_scene, read_ply_mesh, save_scene, write_ply_mesh
from .tracer import SceneRefused, SimConfig, synthesize_pdp, trace
from .validation import MatchParams, ValidationError, compare_runs, read_pdp_dir, write_pdp_csv

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("sitewave")

EXIT_OK, EXIT_INPUT, EXIT_REFUSED, EXIT_INTERNAL = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT, stage: str | None = None, artifacts=None):
        super().__init__(message)
        self.code = code
        self.stage = stage
        self.artifacts = artifacts or {}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (SceneRefused, NonWatertightMeshError, NotImplementedError)):
        return EXIT_REFUSED
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, SceneLoadError, MeshError, ValidationError,
                        tomllib.TOMLDecodeError, KeyError, ValueError, TypeError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


# --------------------------------------------------------------------------
# helpers


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj))


def _load_toml(path: str | Path | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _sim_config(data: dict, **overrides) -> SimConfig:
    data = dict(data.get("sim", data))
    data.pop("links", None)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig.from_mapping(data)


def _load_meshes(mesh_dir: str | Path | None) -> dict:
    if mesh_dir is None:
        return {}
    mesh_dir = Path(mesh_dir)
    if not mesh_dir.is_dir():
        raise FileNotFoundError(f"mesh directory not found: {mesh_dir}")
    # the voted material replaces this placeholder
    return {p.stem: read_ply_mesh(p, MaterialClass.CONCRETE, p.stem) for p in sorted(mesh_dir.glob("*.ply"))}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_input(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        return {"path": str(path), "files": {p.name: _sha256(p) for p in sorted(path.iterdir()) if p.is_file()}}
    return {"path": str(path), "sha256": _sha256(path)}


def _paths_doc(paths, config: SimConfig, link_id: str | None = None) -> dict:
    return {
        "link_id": link_id,
        "config": config.to_dict(),
        "n_paths": len(paths),
        "stats": dict(paths.stats),
        "paths": [p.to_dict() for p in paths],
    }


def _print(args, payload: dict, text: str) -> None:
    if args.json:
        sys.stdout.write(_dump(payload))
    else:
        print(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_materials_eval(args) -> int:
    table = load_material_table(args.table)
    cls = MaterialClass.parse(args.material_class)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        perm = eval_permittivity(table[cls], args.freq)
    theta = math.radians(args.theta_deg)
    co = fresnel(perm, theta)
    rp, rq = reflected_power_fraction(co, "perp"), reflected_power_fraction(co, "par")
    payload = {
        "class": cls.value,
        "freq_hz": args.freq,
        "theta_deg": args.theta_deg,
        "eta": [perm.eta.real, perm.eta.imag],
        "r_perp": [co.r_perp.real, co.r_perp.imag],
        "r_par": [co.r_par.real, co.r_par.imag],
        "power_perp": rp,
        "power_par": rq,
        "clamped": perm.clamped,
        "warnings": [str(w.message) for w in caught],
    }
    text = "\n".join([
        f"class    {cls.value}",
        f"freq     {args.freq:.6e} Hz",
        f"theta    {args.theta_deg:.4f} deg",
        f"eta      {perm.eta.real:.6f} {perm.eta.imag:+.6f}j",
        f"r_perp   {co.r_perp.real:.6f} {co.r_perp.imag:+.6f}j",
        f"r_par    {co.r_par.real:.6f} {co.r_par.imag:+.6f}j",
        f"|r_perp|^2 {rp:.6f}",
        f"|r_par|^2  {rq:.6f}",
    ] + [f"warning: {w.message}" for w in caught])
    _print(args, payload, text)
    return EXIT_OK


def cmd_scene_check(args) -> int:
    scene = load_scene(args.scene)
    objects = {}
    bad = []
    for mesh in scene.meshes:
        rep = validate_manifold(mesh)
        ok = mesh_ok_for_tracing(mesh, rep)
        objects[mesh.object_id] = dict(rep.as_dict(), sheet=mesh.sheet, rt_ready=ok)
        if not ok:
            bad.append(mesh.object_id)
    payload = {"scene": str(args.scene), "n_faces": scene.n_faces, "objects": objects, "offending": bad, "ok": not bad}
    lines = []
    for oid, rep in objects.items():
        state = "watertight" if rep["is_watertight"] else ("open sheet" if rep["rt_ready"] else "NOT RT-ready")
        lines.append(f"{oid}: {state} (boundary={rep['boundary_edge_count']}, nonmanifold={rep['nonmanifold_edge_count']}, "
                     f"inconsistent={rep['inconsistent_normal_pairs']})")
    lines.append("scene OK" if not bad else f"offending objects: {', '.join(bad)}")
    _print(args, payload, "\n".join(lines))
    return EXIT_OK if not bad else EXIT_REFUSED


def _build(cloud_path, votes_path, mesh_dir, recon_cfg: dict):
    cloud = read_point_cloud(cloud_path)
    votes = read_votes(votes_path)
    meshes = _load_meshes(mesh_dir)
    return build_rt_model(cloud, votes, meshes, ReconConfig.from_mapping(recon_cfg))


def cmd_pipeline_build(args) -> int:
    cfg = _load_toml(args.config)
    result = _build(args.cloud, args.votes, args.meshes, cfg.get("recon", cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(result.scene, out)
    if args.report:
        _write_json(Path(args.report), result.report)
    r = result.report
    payload = {"scene": str(out), "n_faces": result.scene.n_faces, "report": r}
    _print(args, payload, f"wrote {out} ({result.scene.n_faces} faces, {len(result.scene.meshes)} objects), "
                          f"retention {r['retention']:.4f}, ties {len(r['ties'])}")
    return EXIT_OK


def cmd_trace(args) -> int:
    config = _sim_config(_load_toml(args.config), tx_pos=args.tx, rx_pos=args.rx)
    scene = load_scene(args.scene)
    table = load_material_table(args.materials) if args.materials else None
    paths = trace(scene, config, table)
    doc = _paths_doc(paths, config, args.link_id)
    _write_json(Path(args.out), doc)
    if args.pdp:
        pdp = synthesize_pdp(paths, config)
        Path(args.pdp).parent.mkdir(parents=True, exist_ok=True)
        write_pdp_csv(args.pdp, args.link_id or "link", pdp, config.freq, args.scenario)
    payload = {"out": str(args.out), "pdp": args.pdp, "n_paths": len(paths), "stats": dict(paths.stats)}
    _print(args, payload, f"{len(paths)} paths written to {args.out} "
                          f"({paths.stats.get('candidates', 0)} candidates from {config.n_rays} rays)")
    return EXIT_OK


def cmd_validate(args) -> int:
    raw = _load_toml(args.params)
    params = MatchParams.from_mapping(raw.get("match", raw))
    report = compare_runs(read_pdp_dir(args.sim), read_pdp_dir(args.meas), params, args.dynamic_range)
    doc = dict(report.to_dict(), params=params.to_dict(), dynamic_range=args.dynamic_range)
    if args.report:
        _write_json(Path(args.report), doc)
    _print(args, doc, _validate_text(doc))
    return EXIT_OK


def _fmt(x, spec=".3f"):
    return "n/a" if x is None else format(x, spec)


def _validate_text(doc: dict) -> str:
    pooled = doc["pooled"]
    lines = [f"pairs {len(doc['pairs'])}, unmatched sim {len(doc['unmatched_sim'])}, "
             f"unmatched meas {len(doc['unmatched_meas'])}"]
    if pooled.get("status") == "exact":
        lines.append("pooled RMSE: exact (zero error)")
    elif pooled.get("status") == "ok":
        lines.append(f"pooled RMSE: {pooled['rmse_linear_mw']:.4e} mW = {pooled['rmse_db']:.3f} dB; "
                     f"dB-domain {pooled['rmse_db_domain']:.3f} dB")
    for name, g in doc["groups"].items():
        s = g["rmse_db_domain"]
        lines.append(f"{name:8s} links={s['n_links']} dB-domain RMSE mean {_fmt(s['mean'])} "
                     f"+/- {_fmt(s['std'])}, median {_fmt(s['median'])}")
    return "\n".join(lines)


def _run_links(cfg: dict) -> list[dict]:
    links = cfg.get("links") or []
    if not links:
        raise CliError("run config defines no [[links]]")
    out, seen = [], set()
    for ln in links:
        lid = str(ln["id"])
        if lid in seen:
            raise CliError(f"duplicate link id {lid!r}")
        seen.add(lid)
        out.append({"id": lid, "tx": [float(x) for x in ln["tx"]], "rx": [float(x) for x in ln["rx"]],
                    "scenario": str(ln.get("scenario", "unknown"))})
    return out


def full_run(cloud, votes, meshes, meas, config_path, out_dir, materials=None) -> dict:
    """Build the RT model, check it, trace each link, synthesize PDPs and validate.

    Returns the run manifest (also written to ``out_dir/manifest.json``).
    """
    out = Path(out_dir)
    cfg = _load_toml(config_path)
    links = _run_links(cfg)
    sim_base = _sim_config({"sim": cfg.get("sim", {})})
    params = MatchParams.from_mapping(cfg.get("match", {}))
    recon_cfg = cfg.get("recon", {})
    table = load_material_table(materials) if materials else None
    inputs = {"cloud": cloud, "votes": votes, "meas": meas, "config": config_path}
    if meshes is not None:
        inputs["meshes"] = meshes
    if materials:
        inputs["materials"] = materials

    manifest = {
        "tool": "sitewave",
        "version": __version__,
        "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "inputs": {},
        "config": {"sim": sim_base.to_dict(), "match": params.to_dict(), "recon": recon_cfg, "links": links},
        "stages": {},
        "timing": {},
        "outputs": [],
    }
    outputs: list[str] = []

    def stage(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s started", name)
        try:
            res = fn()
        except CliError:
            raise
        except Exception as exc:
            raise CliError(f"stage {name!r} failed: {exc}", exit_code_for(exc), name,
                           {"out_dir": str(out), "outputs": list(outputs)}) from exc
        manifest["timing"][name] = round(time.perf_counter() - t0, 6)
        return res

    def inputs_stage():
        for key, p in inputs.items():
            if not Path(p).exists():
                raise FileNotFoundError(f"{key} input not found: {p}")
            manifest["inputs"][key] = _hash_input(p)

    stage("inputs", inputs_stage)
    out.mkdir(parents=True, exist_ok=True)

    def pipeline():
        res = _build(cloud, votes, meshes, recon_cfg)
        save_scene(res.scene, out / "scene" / "scene.xml")
        _write_json(out / "build_report.json", res.report)
        outputs.extend(["scene/scene.xml"] + [f"scene/meshes/{m.object_id}.ply" for m in res.scene.meshes]
                       + ["build_report.json"])
        manifest["stages"]["pipeline"] = {"n_faces": res.scene.n_faces, "retention": res.report["retention"]}
        return res

    stage("pipeline", pipeline)

    def check():
        # trace from the written artefact, so what is validated is what was saved
        scene = load_scene(out / "scene" / "scene.xml")
        reports = {m.object_id: validate_manifold(m) for m in scene.meshes}
        bad = [k for k, m in zip(reports, scene.meshes) if not mesh_ok_for_tracing(m, reports[k])]
        if bad:
            raise SceneRefused({k: reports[k] for k in bad})
        manifest["stages"]["scene_check"] = {"objects": len(reports), "offending": bad}
        return scene

    scene = stage("scene_check", check)

    def trace_links():
        counts = {}
        for ln in links:
            config = _sim_config(sim_base.to_dict(), tx_pos=ln["tx"], rx_pos=ln["rx"])
            paths = trace(scene, config, table)
            _write_json(out / "paths" / f"{ln['id']}.json", _paths_doc(paths, config, ln["id"]))
            pdp = synthesize_pdp(paths, config)
            (out / "pdp").mkdir(parents=True, exist_ok=True)
            write_pdp_csv(out / "pdp" / f"{ln['id']}.csv", ln["id"], pdp, config.freq, ln["scenario"])
            outputs.extend([f"paths/{ln['id']}.json", f"pdp/{ln['id']}.csv"])
            counts[ln["id"]] = dict(paths.stats)
        manifest["stages"]["trace"] = counts

    stage("trace", trace_links)

    def validate():
        report = compare_runs(read_pdp_dir(out / "pdp"), read_pdp_dir(meas), params, sim_base.dynamic_range,
                              {ln["id"]: ln["scenario"] for ln in links})
        doc = dict(report.to_dict(), params=params.to_dict(), dynamic_range=sim_base.dynamic_range)
        _write_json(out / "report.json", doc)
        outputs.append("report.json")
        manifest["stages"]["validate"] = {"pooled": doc["pooled"]}
        return doc

    stage("validate", validate)
    outputs.append("manifest.json")
    manifest["outputs"] = outputs
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_run(args) -> int:
    manifest = full_run(args.cloud, args.votes, args.meshes, args.meas, args.config, args.out, args.materials)
    pooled = manifest["stages"]["validate"]["pooled"]
    _print(args, manifest, f"run complete: {len(manifest['outputs'])} outputs in {args.out}; "
                           f"pooled RMSE status {pooled.get('status')}")
    return EXIT_OK


def write_run_fixture(out_dir: str | Path) -> dict:
    """Write the bundled synthetic end-to-end inputs into ``out_dir``."""
    from . import fixtures as fx

    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "meas").mkdir(parents=True, exist_ok=True)
    cloud, votes, meshes = fx.run_fixture_inputs()
    write_point_cloud(cloud, out / "cloud.ply")
    write_votes(votes, out / "votes.csv")
    for key, mesh in meshes.items():
        write_ply_mesh(mesh, out / "meshes" / f"{key}.ply")
    truth = fx.ground_truth_run_scene()
    lines = ["# synthetic end-to-end fixture", "[sim]"]
    lines += [f"{k} = {v}" for k, v in fx.RUN_SIM.items()]
    lines += ["", "[match]", "delay_scale_ns = 10.0", "power_scale = 10.0", "gate_delay_ns = 20.0", "gate_power = 25.0"]
    for lid, (tx, rx, scen) in fx.RUN_LINKS.items():
        config = SimConfig(tx_pos=tx, rx_pos=rx, **fx.RUN_SIM)
        paths = trace(truth, config)
        write_pdp_csv(out / "meas" / f"{lid}.csv", lid, synthesize_pdp(paths, config), config.freq, scen)
        lines += ["", "[[links]]", f'id = "{lid}"', f"tx = {list(map(float, tx))}", f"rx = {list(map(float, rx))}",
                  f'scenario = "{scen}"']
    (out / "run.toml").write_text("\n".join(lines) + "\n")
    return {"out": str(out), "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())}


def cmd_fixture(args) -> int:
    info = write_run_fixture(args.out)
    _print(args, info, f"fixture written to {args.out}:\n  " + "\n  ".join(info["files"]))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _point(text: str) -> list[float]:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three coordinates, e.g. 1.0,2.0,1.5")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("-v", "--verbose", action="store_true", help="info-level progress logging")

    p = argparse.ArgumentParser(prog="sitewave", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"sitewave {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    mat = sub.add_parser("materials", help="material table utilities", parents=[common])
    mat_sub = mat.add_subparsers(dest="action", required=True)
    ev = mat_sub.add_parser("eval", help="permittivity and Fresnel coefficients", parents=[common])
    ev.add_argument("--class", dest="material_class", required=True)
    ev.add_argument("--freq", type=float, required=True, help="Hz")
    ev.add_argument("--theta-deg", type=float, default=0.0)
    ev.add_argument("--table", help="alternative material table CSV")
    ev.set_defaults(func=cmd_materials_eval)

    sc = sub.add_parser("scene", help="scene utilities", parents=[common])
    sc_sub = sc.add_subparsers(dest="action", required=True)
    chk = sc_sub.add_parser("check", help="manifold report per object", parents=[common])
    chk.add_argument("scene")
    chk.set_defaults(func=cmd_scene_check)

    pl = sub.add_parser("pipeline", help="point cloud to RT model", parents=[common])
    pl_sub = pl.add_subparsers(dest="action", required=True)
    b = pl_sub.add_parser("build", help="build an RT-ready scene", parents=[common])
    b.add_argument("--cloud", required=True)
    b.add_argument("--votes", required=True)
    b.add_argument("--meshes", help="directory of non-planar object meshes (PLY)")
    b.add_argument("--out", required=True, help="scene XML; meshes go to a sibling meshes/ dir")
    b.add_argument("--report")
    b.add_argument("--config", help="TOML with reconstruction parameters")
    b.set_defaults(func=cmd_pipeline_build)

    t = sub.add_parser("trace", help="SBR + image-method trace for one link", parents=[common])
    t.add_argument("--scene", required=True)
    t.add_argument("--config", help="TOML mirroring SimConfig fields")
    t.add_argument("--out", required=True)
    t.add_argument("--pdp")
    t.add_argument("--tx", type=_point)
    t.add_argument("--rx", type=_point)
    t.add_argument("--link-id", default="link")
    t.add_argument("--scenario", default="unknown")
    t.add_argument("--materials", help="alternative material table CSV")
    t.set_defaults(func=cmd_trace)

    v = sub.add_parser("validate", help="match simulated and measured MPCs", parents=[common])
    v.add_argument("--sim", required=True)
    v.add_argument("--meas", required=True)
    v.add_argument("--params")
    v.add_argument("--report")
    v.add_argument("--dynamic-range", type=float, default=25.0)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="full pipeline, trace and validation", parents=[common])
    r.add_argument("--cloud", required=True)
    r.add_argument("--votes", required=True)
    r.add_argument("--meshes")
    r.add_argument("--meas", required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--materials")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fixture", help="write the synthetic end-to-end inputs", parents=[common])
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fixture)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # mapped to exit codes below
        code = exit_code_for(exc)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        err = {"error": str(exc), "type": type(exc).__name__, "exit_code": code}
        if isinstance(exc, CliError):
            err.update(stage=exc.stage, artifacts=exc.artifacts)
        reports = getattr(exc, "reports", None) or getattr(getattr(exc, "__cause__", None), "reports", None)
        if reports:
            err["offending"] = {k: r.as_dict() for k, r in reports.items()}
        if args.json:
            sys.stdout.write(_dump(err))
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
