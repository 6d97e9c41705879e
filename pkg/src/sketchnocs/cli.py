"""Command-line surface tying the pipeline together.

Subcommands: gen-data, train-viewpoint, train, sample, reconstruct, eval,
gradcheck. Every command is deterministic under (config, seed): reruns
produce byte-identical artifacts. Exit codes: 0 success, 1 usage/config,
2 I/O, 3 numerical-check failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import tensor as tz
from .config import Config, parse_config
from .dataset import (
    Manifest,
    build_dataset,
    generate_procedural_shapes,
    load_manifest,
    load_prompt_sidecar,
    save_manifest,
    split_manifest,
)
from .diffusion import (
    DenoiserSpec,
    DenoiserWeights,
    ObjectSamples,
    build_condition,
    ddim_sample,
    denoiser_from_table,
    denoiser_to_table,
    init_denoiser,
    make_schedule,
    train_stage,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractViolationError,
    DegenerateGeometryError,
    InvalidInputError,
    ParseError,
    ResourceLimitError,
)
from .geometry import fuse_point_clouds, nocs_map_to_points, save_ply, save_xyz
from .gradcheck import TOLERANCES, check_all_primitives, check_denoiser
from .metrics import (
    BinaryImage,
    chamfer_distance,
    earth_movers_distance,
    iou_2d,
    project_silhouette,
    subsample_cloud,
)
from .rasters import load_nocs_frame, load_pgm, save_nocs_frame, save_pgm, save_ppm
from .render import make_view_ring
from .tensor import load_checkpoint, save_checkpoint
from .viewpoint import SveWeights, encode_viewpoint, load_sve, save_sve, train_viewpoint_encoder

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class NumericalCheckError(RuntimeError):
    pass


@contextmanager
def _locked_out_dir(out_dir: Path, cfg: Config):
    """One command per output directory at a time."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    os.close(fd)
    try:
        cfg.write_effective(out_dir)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _load_config(args) -> Config:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return parse_config(args.config, overrides)


def _ring(cfg: Config):
    return make_view_ring(
        cfg.ring_views,
        cfg.elevations(),
        seed=cfg.seed,
        distance=cfg.camera_distance,
        fov=cfg.fov(),
        resolution=cfg.resolution,
    )


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    with _locked_out_dir(out, cfg):
        prompts = load_prompt_sidecar(cfg.prompt_file) if cfg.prompt_file else {}
        items = []
        for category in str(cfg.categories).split(","):
            category = category.strip()
            for mesh in generate_procedural_shapes(category, cfg.objects_per_category, cfg.seed):
                items.append((mesh.name, category, mesh))
        ring = _ring(cfg)
        data_dir = out / "dataset"
        manifest = build_dataset(
            items, ring, prompts, data_dir, cfg.seed,
            depth_thresh=cfg.depth_thresh, normal_thresh=cfg.normal_thresh,
            previews=cfg.previews,
        )
        save_manifest(manifest, data_dir / "all.tsv")
        train, test = split_manifest(manifest, cfg.test_fraction, cfg.seed)
        save_manifest(train, data_dir / "train.tsv")
        save_manifest(test, data_dir / "test.tsv")
        print(f"objects: {len(manifest.object_ids())}  views/object: {len(ring)}")
        print(f"records: {len(manifest.records)} total, "
              f"{len(train.records)} train, {len(test.records)} test")
        print(f"manifests: {data_dir}/all.tsv, train.tsv, test.tsv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# viewpoint encoder


def _sve_samples(manifest: Manifest):
    samples = []
    for r in manifest.records:
        samples.append((load_pgm(manifest.root / r.sketch_path), r.view_index))
    return samples


def _train_sve(cfg: Config, data_dir: Path, out: Path) -> SveWeights:
    train_m = load_manifest(data_dir / "train.tsv")
    samples = _sve_samples(train_m)
    val = None
    test_path = data_dir / "test.tsv"
    if test_path.exists():
        val = _sve_samples(load_manifest(test_path))
    sve, history = train_viewpoint_encoder(
        samples, n_bins=cfg.n_bins(), resolution=cfg.resolution,
        feature_dim=cfg.sve_feature_dim, arch_hash=cfg.arch_hash(),
        seed=cfg.seed, epochs=cfg.sve_epochs, lr=cfg.sve_lr,
        batch_size=cfg.sve_batch, val_samples=val,
    )
    save_sve(out / "sve.ckpt", sve)
    val_text = "" if history["val_accuracy"] is None else f"  val accuracy: {history['val_accuracy']:.3f}"
    print(f"viewpoint encoder: train accuracy {history['train_accuracy']:.3f}{val_text}")
    return sve


def cmd_train_viewpoint(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    with _locked_out_dir(out, cfg):
        _train_sve(cfg, Path(args.data), out)
        print(f"saved {out / 'sve.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diffusion training


def load_object_samples(manifest: Manifest, sve: SveWeights) -> list[ObjectSamples]:
    objects = []
    for object_id, records in manifest.by_object().items():
        records = sorted(records, key=lambda r: r.view_index)
        x0 = []
        sketches = []
        f_v = []
        for r in records:
            frame = load_nocs_frame(manifest.root / r.nocs_path)
            stacked = np.concatenate([frame.visible.values, frame.occluded.values], axis=2)
            x0.append(stacked.transpose(2, 0, 1) * 2.0 - 1.0)
            sketch = load_pgm(manifest.root / r.sketch_path)
            sketches.append(sketch[None])
            f_v.append(encode_viewpoint(sketch, sve))
        objects.append(
            ObjectSamples(
                object_id=object_id,
                category=records[0].category,
                prompt=records[0].prompt,
                x0_views=np.asarray(x0, np.float32),
                sketch_views=np.asarray(sketches, np.float32),
                f_v_views=np.asarray(f_v, np.float32),
            )
        )
    return objects


def _save_train_state(path, w: DenoiserWeights, opt: tz.Adam | None, stage: int, next_step: int):
    table = denoiser_to_table(w)
    if opt is not None:
        table.update(opt.state_arrays())
    table["train.stage"] = np.asarray([stage], np.float32)
    table["train.next_step"] = np.asarray([next_step], np.float32)
    save_checkpoint(path, table)


def _load_train_state(path, arch_hash):
    table = load_checkpoint(path)
    w = denoiser_from_table(table, expect_arch_hash=arch_hash, source=str(path))
    stage = int(table["train.stage"][0]) if "train.stage" in table else 2
    next_step = int(table["train.next_step"][0]) if "train.next_step" in table else 0
    opt_state = {k: v for k, v in table.items() if k.startswith("opt.")}
    return w, stage, next_step, opt_state


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    data_dir = Path(args.data)
    with _locked_out_dir(out, cfg):
        sve_path = Path(args.sve) if args.sve else out / "sve.ckpt"
        if sve_path.exists():
            sve = load_sve(sve_path, expect_arch_hash=cfg.arch_hash())
            print(f"loaded viewpoint encoder from {sve_path}")
        else:
            sve = _train_sve(cfg, data_dir, out)
        manifest = load_manifest(data_dir / "train.tsv")
        objects = load_object_samples(manifest, sve)
        print(f"training on {len(objects)} objects "
              f"({sum(o.x0_views.shape[0] for o in objects)} views)")

        spec = DenoiserSpec.from_config(cfg)
        stage, next_step, opt = 1, 0, None
        latest = out / "latest.ckpt"
        if args.resume and latest.exists():
            w, stage, next_step, opt_state = _load_train_state(latest, cfg.arch_hash())
            opt = tz.Adam(lr=cfg.lr)
            opt.load_state_arrays(opt_state)
            print(f"resuming stage {stage} at step {next_step}")
        else:
            w = init_denoiser(spec, cfg.arch_hash(), cfg.seed)

        budgets = {1: cfg.stage1_steps, 2: cfg.stage2_steps}
        curves = []
        every = max(1, int(cfg.checkpoint_every))

        for s in (1, 2):
            if stage > s:
                continue
            start = next_step if stage == s else 0
            if start >= budgets[s]:
                stage, next_step, opt = s + 1, 0, None
                continue

            def on_step(w_now, opt_now, row, _stage=s):
                if (row["step"] + 1) % every == 0:
                    _save_train_state(latest, w_now, opt_now, _stage, row["step"] + 1)

            w, opt, curve = train_stage(
                objects, cfg, w, stage=s, steps=budgets[s], seed=cfg.seed,
                start_step=start, opt=opt, zero_viewpoint=args.zero_viewpoint,
                on_step=on_step,
            )
            curves.extend(curve)
            _save_train_state(out / f"stage{s}.ckpt", w, opt, s, budgets[s])
            _save_train_state(latest, w, None, s + 1, 0)
            stage, next_step, opt = s + 1, 0, None
            if curve:
                print(f"stage {s}: loss {curve[0]['total']:.4f} -> {curve[-1]['total']:.4f} "
                      f"({len(curve)} steps)")

        mode = "a" if args.resume and (out / "loss.csv").exists() else "w"
        with open(out / "loss.csv", mode, encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            if mode == "w":
                writer.writerow(["stage", "step", "total", "mvldm", "l1", "perc"])
            for row in curves:
                writer.writerow([row["stage"], row["step"], repr(row["total"]),
                                 repr(row["mvldm"]), repr(row["l1"]), repr(row["perc"])])
        print(f"checkpoints: {out / 'stage1.ckpt'}, {out / 'stage2.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sampling / reconstruction


def _generate_frames(cfg: Config, args, sketches: np.ndarray, prompt: str):
    sve = load_sve(args.sve, expect_arch_hash=cfg.arch_hash())
    w = denoiser_from_table(load_checkpoint(args.checkpoint),
                            expect_arch_hash=cfg.arch_hash(), source=str(args.checkpoint))
    f_v = np.stack([encode_viewpoint(s, sve) for s in sketches])
    cond = build_condition(sketches, w, prompt, f_v=f_v)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    steps = args.steps if args.steps else cfg.ddim_steps
    frames = ddim_sample(w, cond, steps=steps, seed=cfg.seed, s=schedule,
                         mask_threshold=cfg.mask_threshold)
    return frames


def _read_sketches(paths, resolution) -> np.ndarray:
    sketches = []
    for p in paths:
        sk = load_pgm(p)
        if sk.shape != (resolution, resolution):
            raise InvalidInputError(
                f"{p}: sketch is {sk.shape}, configured resolution is {resolution}"
            )
        sketches.append(sk)
    return np.stack(sketches)


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    with _locked_out_dir(out, cfg):
        sketches = _read_sketches(args.sketches, cfg.resolution)
        frames = _generate_frames(cfg, args, sketches, args.prompt)
        for i, frame in enumerate(frames):
            save_nocs_frame(out / f"view{i:02d}.nmap", frame)
            if cfg.previews:
                save_ppm(out / f"view{i:02d}.ppm", frame.visible.values)
        print(f"wrote {len(frames)} NOCS frame(s) to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if args.labels and len(args.labels) != len(args.sketches):
        raise InvalidInputError(
            f"{len(args.labels)} labels for {len(args.sketches)} sketches"
        )
    with _locked_out_dir(out, cfg):
        sketches = _read_sketches(args.sketches, cfg.resolution)
        frames = _generate_frames(cfg, args, sketches, args.prompt)
        tags = args.labels if args.labels else list(range(len(frames)))
        clouds = []
        for i, frame in enumerate(frames):
            save_nocs_frame(out / f"view{i:02d}.nmap", frame)
            if cfg.previews:
                save_ppm(out / f"view{i:02d}.ppm", frame.visible.values)
            clouds.append(nocs_map_to_points(frame, view_tag=tags[i]))
        fused = fuse_point_clouds(clouds)
        save_ply(fused, out / "cloud.ply")
        save_xyz(fused, out / "cloud.xyz")
        print(f"fused {len(frames)} view(s) into {len(fused)} points -> {out / 'cloud.ply'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    data_dir = Path(args.data)
    with _locked_out_dir(out, cfg):
        sve = load_sve(args.sve, expect_arch_hash=cfg.arch_hash())
        w = denoiser_from_table(load_checkpoint(args.checkpoint),
                                expect_arch_hash=cfg.arch_hash(), source=str(args.checkpoint))
        manifest = load_manifest(data_dir / (args.split + ".tsv"))
        schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        view_counts = cfg.view_counts()
        rows = []
        for object_id, records in manifest.by_object().items():
            records = sorted(records, key=lambda r: r.view_index)
            gt_frames = [load_nocs_frame(manifest.root / r.nocs_path) for r in records]
            gt_cloud = fuse_point_clouds(
                [nocs_map_to_points(f, r.view_index) for f, r in zip(gt_frames, records)]
            )
            obj_key = zlib.crc32(object_id.encode("utf-8"))
            for k in view_counts:
                k_eff = min(k, len(records))
                rng = np.random.default_rng([cfg.seed, obj_key, k])
                chosen = sorted(rng.choice(len(records), size=k_eff, replace=False).tolist())
                sketches = np.stack(
                    [load_pgm(manifest.root / records[i].sketch_path) for i in chosen]
                )
                f_v = np.stack([encode_viewpoint(s, sve) for s in sketches])
                cond = build_condition(sketches, w, records[chosen[0]].prompt, f_v=f_v)
                frames = ddim_sample(w, cond, steps=cfg.ddim_steps,
                                     seed=int(np.uint32(cfg.seed + obj_key + k)),
                                     s=schedule, mask_threshold=cfg.mask_threshold)
                rec = fuse_point_clouds(
                    [nocs_map_to_points(f, records[i].view_index) for f, i in zip(frames, chosen)]
                )
                if len(rec) == 0:
                    cd = emd = float("nan")
                    iou = 0.0
                else:
                    cd_a, cd_b = rec, gt_cloud
                    if cfg.cd_points > 0:
                        cd_a = subsample_cloud(cd_a, cfg.cd_points, cfg.seed)
                        cd_b = subsample_cloud(cd_b, cfg.cd_points, cfg.seed)
                    cd = chamfer_distance(cd_a, cd_b)
                    emd = earth_movers_distance(
                        subsample_cloud(rec, cfg.emd_points, cfg.seed),
                        subsample_cloud(gt_cloud, cfg.emd_points, cfg.seed),
                    )
                    first = records[chosen[0]]
                    silhouette = BinaryImage(gt_frames[chosen[0]].mask)
                    projected = project_silhouette(rec, first.pose(), cfg.splat_radius)
                    iou = iou_2d(projected, silhouette)
                rows.append({
                    "object_id": object_id,
                    "category": records[0].category,
                    "views": k,
                    "cd": cd,
                    "emd": emd,
                    "iou": iou,
                })
        with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["object_id", "category", "views", "cd", "emd", "iou"])
            for r in rows:
                writer.writerow([r["object_id"], r["category"], r["views"],
                                 repr(r["cd"]), repr(r["emd"]), repr(r["iou"])])
            categories = sorted(set(r["category"] for r in rows))
            for category in categories:
                for k in view_counts:
                    sel = [r for r in rows if r["category"] == category and r["views"] == k]
                    if not sel:
                        continue
                    writer.writerow([
                        "mean", category, k,
                        repr(float(np.mean([r["cd"] for r in sel]))),
                        repr(float(np.mean([r["emd"] for r in sel]))),
                        repr(float(np.mean([r["iou"] for r in sel]))),
                    ])
        print(f"evaluated {len(manifest.object_ids())} objects x views {view_counts}")
        print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        cfg.write_effective(args.out)
    failures = []
    for dtype in (np.float32, np.float64):
        tol = TOLERANCES[np.dtype(dtype)]
        print(f"== {np.dtype(dtype).name} (tolerance {tol:g})")
        results = check_all_primitives(dtype)
        results.update(check_denoiser(dtype))
        for name in sorted(results):
            err = results[name]
            status = "ok" if err < tol else "FAIL"
            print(f"  {name:32s} {err:.3e}  {status}")
            if err >= tol:
                failures.append((np.dtype(dtype).name, name, err))
    if failures:
        print(f"{len(failures)} gradient check(s) over tolerance", file=sys.stderr)
        raise NumericalCheckError(f"{len(failures)} gradient check(s) failed")
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchnocs",
        description="Sketch-to-point-cloud toolkit: data generation, training, "
                    "reconstruction and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate meshes and render the training set")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-viewpoint", help="train the sketch viewpoint encoder")
    common(p)
    p.add_argument("--data", required=True, help="gen-data dataset directory")
    p.set_defaults(func=cmd_train_viewpoint)

    p = sub.add_parser("train", help="two-stage training of the conditional denoiser")
    common(p)
    p.add_argument("--data", required=True, help="gen-data dataset directory")
    p.add_argument("--sve", default=None, help="existing viewpoint encoder checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from latest.ckpt")
    p.add_argument("--zero-viewpoint", action="store_true",
                   help="ablation: zero the viewpoint feature during training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate NOCS frames from sketches")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sve", required=True)
    p.add_argument("--sketches", nargs="+", required=True, help="PGM sketch paths")
    p.add_argument("--prompt", default="", help="text prompt")
    p.add_argument("--steps", type=int, default=None, help="sampling steps")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="sketches -> NOCS frames -> fused point cloud")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sve", required=True)
    p.add_argument("--sketches", nargs="+", required=True, help="PGM sketch paths")
    p.add_argument("--labels", nargs="*", type=int, default=None,
                   help="view tags recorded per input sketch")
    p.add_argument("--prompt", default="", help="text prompt")
    p.add_argument("--steps", type=int, default=None, help="sampling steps")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="reconstruct a manifest and report CD/EMD/IoU")
    common(p)
    p.add_argument("--data", required=True, help="gen-data dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sve", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify every primitive and the denoiser block")
    common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, DegenerateGeometryError,
            ContractViolationError, ResourceLimitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
