"""Command-line pipeline orchestration.

Subcommands: phantom, register, voxelize, update, eval, pipeline.
Every command is deterministic given its inputs and flags; outputs are
byte-identical across invocations (fixed serialization order, no
timestamps). Exit codes: 0 success, 2 input/format error, 3
geometry/registration error, 4 internal invariant violation.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import accel, metrics, phantom, rayvox, update
from .errors import FormatError, GeometryError, RegistrationError, VictError
from .geomio import read_fcsv, read_nrrd, read_stl, to_lps
from .register import RigidTransform, apply_transform, fit_rigid, pair_landmarks
from .volgrid import CtVolume, mask_to_volume, threshold_mask, volume_to_mask

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_GEOMETRY = 3
EXIT_INTERNAL = 4

# the cadaveric protocol used 3-10 landmarks; outside that, warn
LANDMARK_COUNT_RANGE = (3, 10)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(obj, out) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_transform(path) -> RigidTransform:
    try:
        with open(path) as fh:
            data = json.load(fh)
        return RigidTransform.from_matrix(data["matrix"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a transform artifact ({exc})") from exc


def _read_camera(path, frame_default: str):
    cam = to_lps(read_fcsv(path, default_frame=frame_default))
    return cam


def _rayvox_params(geom, args) -> rayvox.RayVoxParams:
    step = args.step_mm if args.step_mm is not None else rayvox.default_step(geom)
    return rayvox.RayVoxParams(
        step=step,
        dilation_radius=args.dilate,
        closing_radius=args.close,
        fill_holes=not args.no_fill_holes,
    )


def _add_rayvox_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--step-mm", type=float, default=None, help="ray sample spacing (default: half the min voxel spacing)")
    p.add_argument("--dilate", type=int, default=1, help="binary dilation radius in voxels")
    p.add_argument("--close", type=int, default=2, help="morphological closing radius in voxels")
    p.add_argument("--no-fill-holes", action="store_true", help="skip hole filling")


def _add_fcsv_frame_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--fcsv-frame",
        choices=["RAS", "LPS"],
        default="RAS",
        help="frame assumed for FCSV files that do not declare one",
    )


def cmd_phantom(args) -> int:
    spec = phantom.load_spec(args.spec)
    manifest = phantom.emit(spec, args.out)
    print(f"phantom: wrote {len(manifest['intervals'])} interval(s) to {args.out}")
    return EXIT_OK


def cmd_register(args) -> int:
    src = to_lps(read_fcsv(args.source, default_frame=args.fcsv_frame))
    dst = to_lps(read_fcsv(args.target, default_frame=args.fcsv_frame))
    pairs, skipped = pair_landmarks(src, dst)
    for label in skipped:
        print(f"register: warning: landmark {label!r} present on one side only, skipped", file=sys.stderr)
    lo, hi = LANDMARK_COUNT_RANGE
    if not lo <= len(pairs) <= hi:
        print(f"register: warning: {len(pairs)} landmark pairs is outside the usual {lo}-{hi}", file=sys.stderr)
    transform, fre = fit_rigid(pairs)
    print(f"register: {len(pairs)} pairs, FRE {fre:.6f} mm", file=sys.stderr)
    _dump_json(
        {
            "matrix": transform.matrix().tolist(),
            "fre_mm": fre,
            "pairs_used": len(pairs),
            "skipped_labels": skipped,
        },
        args.out,
    )
    return EXIT_OK


def _build_mask(args, pct: CtVolume):
    mesh = read_stl(args.mesh)
    camera = _read_camera(args.camera, args.fcsv_frame)
    if args.transform:
        transform = _load_transform(args.transform)
        mesh = apply_transform(transform, mesh)
        camera = apply_transform(transform, camera)
    params = _rayvox_params(pct.geometry, args)
    degenerate = rayvox.count_degenerate_vertices(mesh, rayvox.camera_point(camera))
    if degenerate:
        print(f"voxelize: warning: {degenerate} vertices coincide with the camera, skipped", file=sys.stderr)
    return rayvox.build_recon_mask(mesh, camera, pct.geometry, params)


def cmd_voxelize(args) -> int:
    pct = read_nrrd(args.pct)
    mask = _build_mask(args, pct)
    from .geomio import write_nrrd

    write_nrrd(mask_to_volume(mask), args.out)
    print(f"voxelize: {mask.count()} voxels set, wrote {args.out}")
    return EXIT_OK


def cmd_update(args) -> int:
    from .geomio import write_nrrd

    pct = read_nrrd(args.pct)
    mask = _build_mask(args, pct)
    params = update.UpdateParams(tau=args.tau_hu, air_hu=args.air_hu)
    vict = update.update_volume(pct, mask, params)
    write_nrrd(vict, args.out_vict)
    write_nrrd(mask_to_volume(mask), args.out_mask)
    changed = int(np.count_nonzero(vict.values != pct.values))
    print(f"update: {changed} voxels resected, wrote {args.out_vict} and {args.out_mask}")
    return EXIT_OK


def _geom_desc(name, geom) -> str:
    return (
        f"{name}: dims {geom.dims.tolist()} spacing {geom.spacing.tolist()} "
        f"origin {geom.origin.tolist()} direction {geom.direction.tolist()}"
    )


def cmd_eval(args) -> int:
    vict = read_nrrd(args.vict)
    gt = read_nrrd(args.gt)
    m_rec = volume_to_mask(read_nrrd(args.mask, hu_range=None))
    for name, other in (("gt", gt.geometry), ("mask", m_rec.geometry)):
        if other != vict.geometry:
            raise GeometryError(
                "inputs live on different grids\n  "
                + _geom_desc("vict", vict.geometry) + "\n  " + _geom_desc(name, other)
            )
    mode = metrics.PER_AXIS_MODE if args.per_axis_mm else metrics.MEAN_SPACING_MODE
    report = metrics.evaluate(vict, gt, m_rec, tau=args.tau_hu, margin=args.margin, spacing_mode=mode)
    payload = report.to_dict()
    payload["params"] = {"tau_hu": args.tau_hu, "margin": args.margin}
    payload["inputs"] = {
        "vict": {"path": str(args.vict), "sha256": _sha256(args.vict)},
        "gt": {"path": str(args.gt), "sha256": _sha256(args.gt)},
        "mask": {"path": str(args.mask), "sha256": _sha256(args.mask)},
    }
    _dump_json(payload, args.out)
    if args.out and args.out != "-":
        print(f"eval: dsc {report.dsc:.4f}, hd95 {report.hd95:.3f} mm, wrote {args.out}")
    return EXIT_OK


def _load_manifest(path):
    base = Path(path).parent
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        manifest = {
            "pct": resolve(data["pct"]),
            "intervals": [
                {"recon_stl": resolve(iv["recon_stl"]), "camera_fcsv": resolve(iv["camera_fcsv"])}
                for iv in data["intervals"]
            ],
            "landmarks_src": resolve(data["landmarks_src"]),
            "landmarks_dst": resolve(data["landmarks_dst"]),
            "params": dict(data.get("params", {})),
            "gt": [resolve(p) for p in data.get("gt", [])],
        }
    except KeyError as exc:
        raise FormatError(f"{path}: manifest missing required key {exc}") from exc
    if not manifest["intervals"]:
        raise FormatError(f"{path}: manifest interval list is empty")
    missing = []
    for p in (
        [manifest["pct"], manifest["landmarks_src"], manifest["landmarks_dst"]]
        + [iv["recon_stl"] for iv in manifest["intervals"]]
        + [iv["camera_fcsv"] for iv in manifest["intervals"]]
        + manifest["gt"]
    ):
        if not Path(p).is_file():
            missing.append(str(p))
    if missing:
        raise FormatError(f"{path}: referenced files do not exist: {', '.join(missing)}")
    if manifest["gt"] and len(manifest["gt"]) != len(manifest["intervals"]):
        raise FormatError(f"{path}: gt list length does not match interval count")
    return manifest


def cmd_pipeline(args) -> int:
    from .geomio import write_nrrd

    manifest = _load_manifest(args.manifest)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    params = manifest["params"]
    tau = float(params.get("tau_hu", update.DEFAULT_TAU_HU))
    air = int(params.get("air_hu", update.DEFAULT_AIR_HU))
    margin = int(params.get("roi_margin", metrics.DEFAULT_ROI_MARGIN))

    pct = read_nrrd(manifest["pct"])
    ray_params = rayvox.RayVoxParams(
        step=float(params.get("step_mm", rayvox.default_step(pct.geometry))),
        dilation_radius=int(params.get("dilation_radius", 1)),
        closing_radius=int(params.get("closing_radius", 2)),
        fill_holes=bool(params.get("fill_holes", True)),
    )
    update_params = update.UpdateParams(tau=tau, air_hu=air)

    src = to_lps(read_fcsv(manifest["landmarks_src"], default_frame=args.fcsv_frame))
    dst = to_lps(read_fcsv(manifest["landmarks_dst"], default_frame=args.fcsv_frame))
    pairs, skipped = pair_landmarks(src, dst)
    transform, fre = fit_rigid(pairs)
    print(f"pipeline: registration FRE {fre:.6f} mm over {len(pairs)} pairs")
    _dump_json(
        {"matrix": transform.matrix().tolist(), "fre_mm": fre, "pairs_used": len(pairs), "skipped_labels": skipped},
        outdir / "transform.json",
    )

    summary = {"fre_mm": fre, "intervals": []}
    cumulative = None
    m_pct = threshold_mask(pct, tau)
    for k, interval in enumerate(manifest["intervals"], start=1):
        try:
            mesh = apply_transform(transform, read_stl(interval["recon_stl"]))
            camera = apply_transform(transform, to_lps(read_fcsv(interval["camera_fcsv"], default_frame=args.fcsv_frame)))
            mask = rayvox.build_recon_mask(mesh, camera, pct.geometry, ray_params)
            cumulative = mask if cumulative is None else (cumulative | mask)
            vict = update.apply_update(pct, update.vict_mask(m_pct, cumulative), update_params)
            entry = {
                "vict": f"vict_{k}.nrrd",
                "mrec": f"mrec_{k}.nrrd",
                "occupied_voxels": threshold_mask(vict, tau).count(),
            }
            write_nrrd(vict, outdir / entry["vict"])
            write_nrrd(mask_to_volume(cumulative), outdir / entry["mrec"])
            if manifest["gt"]:
                gt = read_nrrd(manifest["gt"][k - 1])
                report = metrics.evaluate(vict, gt, cumulative, tau=tau, margin=margin)
                payload = report.to_dict()
                payload["params"] = {"tau_hu": tau, "margin": margin}
                payload["inputs"] = {
                    "vict": {"path": entry["vict"], "sha256": _sha256(outdir / entry["vict"])},
                    "gt": {"path": str(manifest["gt"][k - 1]), "sha256": _sha256(manifest["gt"][k - 1])},
                    "mask": {"path": entry["mrec"], "sha256": _sha256(outdir / entry["mrec"])},
                }
                _dump_json(payload, outdir / f"report_{k}.json")
                entry["report"] = f"report_{k}.json"
                entry["dsc"] = report.dsc
                entry["hd95_mm"] = report.hd95
                print(f"pipeline: interval {k}: dsc {report.dsc:.4f}, hd95 {report.hd95:.3f} mm")
            else:
                print(f"pipeline: interval {k}: updated (no ground truth, eval skipped)")
            summary["intervals"].append(entry)
        except VictError as exc:
            raise type(exc)(f"interval {k}: {exc}") from exc
    _dump_json(summary, outdir / "summary.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vict",
        description="Update a preoperative CT with intraoperative surface reconstructions.",
    )
    parser.add_argument("--threads", type=int, default=0, help="numba thread count (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic ground-truth case")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="rigid landmark registration between two FCSV files")
    p.add_argument("source", help="landmarks in the reconstruction frame (FCSV)")
    p.add_argument("target", help="landmarks in the CT frame (FCSV)")
    p.add_argument("--out", default="-", help="transform JSON (default: stdout)")
    _add_fcsv_frame_flag(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("voxelize", help="build the reconstruction occupancy mask")
    p.add_argument("pct", help="CT volume defining the grid (NRRD)")
    p.add_argument("mesh", help="reconstruction surface (STL)")
    p.add_argument("camera", help="camera origin fiducial (FCSV)")
    p.add_argument("--transform", default=None, help="rigid transform JSON to apply to mesh+camera")
    p.add_argument("--out", required=True, help="output mask NRRD (0/1 int16)")
    _add_rayvox_flags(p)
    _add_fcsv_frame_flag(p)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("update", help="produce the updated CT for one reconstruction")
    p.add_argument("pct", help="preoperative CT (NRRD)")
    p.add_argument("mesh", help="reconstruction surface (STL)")
    p.add_argument("camera", help="camera origin fiducial (FCSV)")
    p.add_argument("--transform", default=None, help="rigid transform JSON to apply to mesh+camera")
    p.add_argument("--out-vict", required=True, help="updated CT output (NRRD)")
    p.add_argument("--out-mask", required=True, help="reconstruction mask output (NRRD)")
    p.add_argument("--tau-hu", type=float, default=update.DEFAULT_TAU_HU, help="anatomy threshold in HU")
    p.add_argument("--air-hu", type=int, default=update.DEFAULT_AIR_HU, help="replacement intensity in HU")
    _add_rayvox_flags(p)
    _add_fcsv_frame_flag(p)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("eval", help="compare an updated CT against ground truth")
    p.add_argument("vict", help="updated CT (NRRD)")
    p.add_argument("gt", help="ground-truth CT (NRRD)")
    p.add_argument("mask", help="reconstruction mask (NRRD) defining the ROI")
    p.add_argument("--out", default="-", help="report JSON (default: stdout)")
    p.add_argument("--tau-hu", type=float, default=update.DEFAULT_TAU_HU, help="anatomy threshold in HU")
    p.add_argument("--margin", type=int, default=metrics.DEFAULT_ROI_MARGIN, help="ROI margin in voxels")
    p.add_argument("--per-axis-mm", action="store_true", help="true anisotropic distances instead of mean-spacing scaling")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run register + update (+ eval) over a manifest")
    p.add_argument("manifest", help="pipeline manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    _add_fcsv_frame_flag(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        accel.set_num_threads(args.threads)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"vict: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"vict: format error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GeometryError, RegistrationError) as exc:
        kind = "geometry" if isinstance(exc, GeometryError) else "registration"
        print(f"vict: {kind} error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except VictError as exc:
        print(f"vict: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as exc:
        print(f"vict: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
