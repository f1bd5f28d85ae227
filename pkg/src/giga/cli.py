"""Command-line frontend tying the pipeline together.

Subcommands: datagen (build a labeled dataset directory), train (fit a
model, writing checkpoints and a loss CSV), eval (clutter-removal benchmark
to a metrics CSV), reconstruct (mesh + IoU report for one scene), landscape
(one slice of the predicted quality field as CSV and PNG).

Exit codes: 0 success, 2 usage errors (argparse), 3 runtime failures.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .bench import (BenchConfig, model_policy, random_surface_policy,
                    run_benchmark, write_metrics_csv)
from .detect import DetectionConfig, affordance_landscape, detect
from .network import GigaNet
from .oracle import (GripperModel, build_dataset, evaluate_grasp,
                     load_dataset, sample_grasp_candidates)
from .recon import iou_grasp, mesh_from_model, net_occupancy_fn, save_ply, \
    volumetric_iou
from .scene import gen_packed_scene, gen_pile_scene
from .sensor import NoiseParams, apply_noise, place_camera, render_depth
from .train import MODES, TrainConfig, train_loop
from .tsdf import TsdfGrid, integrate_depth

logger = logging.getLogger(__name__)

_GENERATORS = {"packed": gen_packed_scene, "pile": gen_pile_scene}


def _add_common(p, scenario=True):
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    if scenario:
        p.add_argument("--scenario", choices=("packed", "pile"),
                       default="packed", help="scene generator (default packed)")
    p.add_argument("--resolution", type=int, default=40,
                   help="TSDF and query grid resolution (default 40)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="giga",
        description="Grasp affordance + occupancy pipeline on synthetic "
                    "desk scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a labeled dataset directory")
    _add_common(p)
    p.add_argument("--scenes", type=int, default=100,
                   help="number of scenes (default 100)")
    p.add_argument("--objects", type=int, default=5,
                   help="objects per scene (default 5)")
    p.add_argument("--grasps", type=int, default=64,
                   help="grasp candidates per scene before balancing "
                        "(default 64)")
    p.add_argument("--occ", type=int, default=2048,
                   help="occupancy samples per scene (default 2048)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="fit a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=MODES, default="joint",
                   help="training mode (default joint)")
    p.add_argument("--epochs", type=int, default=10,
                   help="training epochs (default 10)")
    p.add_argument("--lr", type=float, default=2e-4,
                   help="Adam learning rate (default 2e-4)")
    p.add_argument("--batch-size", type=int, default=32,
                   help="scenes per step (default 32)")
    p.add_argument("--init", default=None,
                   help="checkpoint to start from (required for detached)")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the clutter-removal benchmark")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained model")
    p.add_argument("--episodes", type=int, default=100,
                   help="episodes per repeat (default 100)")
    p.add_argument("--repeats", type=int, default=5,
                   help="independent repeats (default 5)")
    p.add_argument("--objects", type=int, default=5,
                   help="objects per scene (default 5)")
    p.add_argument("--mode", default="model",
                   help="label for the metrics rows (default model)")
    p.add_argument("--baseline", action="store_true",
                   help="also run the random surface-grasp baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct",
                       help="mesh one scene and report IoU metrics")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained model")
    p.add_argument("--objects", type=int, default=5,
                   help="objects per scene (default 5)")
    p.add_argument("--samples", type=int, default=100000,
                   help="Monte Carlo IoU samples (default 100000)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("landscape",
                       help="export one quality-field slice as CSV and PNG")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained model")
    p.add_argument("--objects", type=int, default=5,
                   help="objects per scene (default 5)")
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=2,
                   help="slice axis (default 2)")
    p.add_argument("--index", type=int, default=None,
                   help="slice index (default: middle)")
    p.set_defaults(func=cmd_landscape)

    return parser


# ---------------------------------------------------------------------------
# Shared helpers


def _load_net(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net, _ = GigaNet.load(path)
    return net


def _observed_scene(scenario, seed, objects, resolution):
    """Scene plus its fused noisy-depth TSDF, seeded like an episode."""
    root = np.random.SeedSequence(seed)
    scene_ss, noise_ss = root.spawn(2)
    scene = _GENERATORS[scenario](int(scene_ss.generate_state(1)[0]),
                                  object_count=objects)
    cam = place_camera(scene.workspace_size)
    img = apply_noise(render_depth(scene, cam), NoiseParams(),
                      int(noise_ss.generate_state(1)[0]))
    grid = integrate_depth(TsdfGrid.empty(resolution, scene.workspace_size),
                           img, cam)
    return scene, grid


# ---------------------------------------------------------------------------
# Commands


def cmd_datagen(args):
    records = build_dataset(args.scenes, args.scenario, args.seed,
                            out_dir=args.out, grasps_per_scene=args.grasps,
                            occ_per_scene=args.occ, object_count=args.objects,
                            resolution=args.resolution)
    print(f"wrote {len(records)} scenes to {args.out}")
    return 0


def cmd_train(args):
    records = load_dataset(args.data)
    config = TrainConfig(lr=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs, seed=args.seed, mode=args.mode)
    net = _load_net(args.init) if args.init else None
    if config.mode == "detached" and net is None:
        raise ValueError("detached mode needs --init with a trained checkpoint")
    net, history = train_loop(records, config, net=net, out_dir=args.out)
    last = history[-1]
    print(f"trained {config.mode} for {config.epochs} epochs on "
          f"{len(records)} scenes; final L_A={last['L_A']:.4f} "
          f"L_G={last['L_G']:.4f}")
    return 0


def cmd_eval(args):
    net = _load_net(args.checkpoint)
    config = BenchConfig(object_count=args.objects,
                         resolution=args.resolution)
    os.makedirs(args.out, exist_ok=True)
    policy = model_policy(net, DetectionConfig(query_resolution=args.resolution))
    rows = [run_benchmark(policy, args.scenario, args.episodes, args.seed,
                          repeats=args.repeats, mode=args.mode, config=config,
                          log_path=os.path.join(args.out, "episodes_model.jsonl"))]
    if args.baseline:
        rows.append(run_benchmark(
            random_surface_policy(), args.scenario, args.episodes, args.seed,
            repeats=args.repeats, mode="baseline", config=config,
            log_path=os.path.join(args.out, "episodes_baseline.jsonl")))
    path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(path, rows)
    for m in rows:
        print(f"{m.scenario} {m.mode}: GSR {m.gsr_mean:.1f}±{m.gsr_std:.1f}% "
              f"DR {m.dr_mean:.1f}±{m.dr_std:.1f}% over "
              f"{m.episodes}x{m.repeats} episodes")
    print(f"metrics written to {path}")
    return 0


def cmd_reconstruct(args):
    net = _load_net(args.checkpoint)
    scene, grid = _observed_scene(args.scenario, args.seed, args.objects,
                                  args.resolution)
    os.makedirs(args.out, exist_ok=True)
    mesh = mesh_from_model(net, grid, resolution=args.resolution)
    ply = os.path.join(args.out, "scene.ply")
    save_ply(mesh, ply)

    predict = net_occupancy_fn(net, grid)
    mc_seed = args.seed + 1
    iou = volumetric_iou(predict, scene, n=args.samples, seed=mc_seed)
    gripper = GripperModel()
    cands = sample_grasp_candidates(scene, gripper, 256, args.seed + 2)
    good = [g for g in cands if evaluate_grasp(scene, gripper, g)]
    if good:
        iou_g = iou_grasp(predict, scene, good, gripper, n=args.samples,
                          seed=mc_seed)
    else:
        logger.warning("no successful grasp among 256 candidates; "
                       "IoU-Grasp left empty")
        iou_g = float("nan")
    path = os.path.join(args.out, "recon.csv")
    with open(path, "w") as f:
        f.write("scenario,seed,resolution,n_grasps,IoU,IoU_grasp\n")
        f.write(f"{args.scenario},{args.seed},{args.resolution},"
                f"{len(good)},{iou!r},{iou_g!r}\n")
    print(f"mesh: {ply} ({len(mesh)} triangles); IoU {iou:.3f}; "
          f"IoU-Grasp {iou_g:.3f} over {len(good)} grasps")
    return 0


def cmd_landscape(args):
    net = _load_net(args.checkpoint)
    _, grid = _observed_scene(args.scenario, args.seed, args.objects,
                              args.resolution)
    os.makedirs(args.out, exist_ok=True)
    field = affordance_landscape(net, grid, resolution=args.resolution,
                                 axis=args.axis, index=args.index)
    np.savetxt(os.path.join(args.out, "landscape.csv"), field, delimiter=",")
    from PIL import Image
    gray = np.round(np.clip(field, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(
        os.path.join(args.out, "landscape.png"))

    (grasp, quality), _ = detect(net, grid,
                                 DetectionConfig(query_resolution=args.resolution))
    if grasp is None:
        print(json.dumps(None))
    else:
        print(json.dumps({"t": [float(v) for v in grasp.center],
                          "quat": [float(v) for v in grasp.rotation],
                          "w": float(grasp.width),
                          "q": float(quality)}, sort_keys=True))
    print(f"slice written to {args.out}")
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures get a clean line and code 3
        logger.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
