"""
Perching lab command-line entrypoint.

Subcommands: train, map, threshold, compare, hinge-sweep, alpha-sweep, episode.
Exit codes: 0 success, 2 configuration error, 3 runtime divergence, 1 other errors.
"""

import os
import sys
import csv
import json
import math
import argparse
import logging
import hashlib
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional

from sqlalchemy.exc import SQLAlchemyError

from perch_errors import PerchError, ConfigError
from perch_config import ExperimentConfig, get_settings, load_config
from robot_geometry import describe
from sim_core import SurfaceSpec, TRAJECTORY_COLUMNS, trajectory_rows
from perching_env import PerchingEnv, flight_angle_bounds, evaluation_condition, run_episode_with_trajectory, \
    append_episode_log
from policy_network import load_policy
from sac_trainer import train, write_learning_curve
from landing_analysis import (
    MapGrid,
    SuccessCriterion,
    SuccessMap,
    alpha_sweep,
    compare_maps,
    hinge_sweep,
    read_map_csv,
    smooth_map,
    sweep_success_map,
    threshold_alignment,
    threshold_curve,
    write_comparison_csv,
    write_map_csv,
    write_map_sidecar,
    write_threshold_csv,
)
from run_registry import RunRegistry, file_sha256

logger = logging.getLogger(__name__)


# ============================================================================
# RUN CONTEXT
# ============================================================================

class RunContext:
    """Run directory + registry bookkeeping for one subcommand invocation"""

    current: Optional["RunContext"] = None

    def __init__(self, command: str, digest: str, seed: int, out: Optional[str], output_dir: Optional[str]):
        settings = get_settings()
        self.command = command
        self.digest = digest
        self.seed = seed
        if out:
            self.run_dir = out
        else:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
            self.run_dir = os.path.join(output_dir or settings.output_root, f"{stamp}_{digest[:12]}")
        os.makedirs(self.run_dir, exist_ok=True)
        self.registry: Optional[RunRegistry] = None
        self.run_id: Optional[int] = None
        try:
            self.registry = RunRegistry(settings.registry_url)
            self.run_id = self.registry.start_run(command, digest, seed, self.run_dir)
        except SQLAlchemyError as e:
            logger.warning(f"[Registry] unavailable, continuing without it: {e}")
            self.registry = None
        RunContext.current = self

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def artifact(self, path: str, kind: str) -> str:
        if self.registry is not None and self.run_id is not None:
            try:
                self.registry.add_artifact(self.run_id, path, kind)
            except SQLAlchemyError as e:
                logger.warning(f"[Registry] could not record {path}: {e}")
        logger.info(f"[CLI] wrote {kind}: {path}")
        return path

    def finish(self, status: str, message: Optional[str] = None):
        RunContext.current = None
        if self.registry is not None and self.run_id is not None:
            try:
                self.registry.finish_run(self.run_id, status, message)
            except SQLAlchemyError as e:
                logger.warning(f"[Registry] could not close run {self.run_id}: {e}")


def _seed(args: argparse.Namespace, config: Optional[ExperimentConfig]) -> int:
    if args.seed is not None:
        return args.seed
    return config.seed if config is not None else 0


def _workers(args: argparse.Namespace) -> int:
    return args.workers if args.workers is not None else get_settings().workers


def _require(args: argparse.Namespace, name: str) -> Any:
    value = getattr(args, name)
    if value is None:
        raise ConfigError(f"--{name.replace('_', '-')}", "required for this subcommand")
    return value


def _surface(config: ExperimentConfig, angle_deg: float) -> SurfaceSpec:
    return SurfaceSpec(math.radians(angle_deg), contact_epsilon=config.env.contact_epsilon,
                       attach_range=config.env.attach_range)


def _grid(config: ExperimentConfig, theta_plane: float) -> MapGrid:
    ev = config.evaluation
    if ev.flight_angle_range_deg is None:
        low, high = flight_angle_bounds(theta_plane, math.radians(config.training_env.flight_angle_margin_deg))
        angle_range = (math.degrees(low), math.degrees(high))
    else:
        angle_range = ev.flight_angle_range_deg
    return MapGrid.linear(ev.speed_range, ev.n_speeds, angle_range, ev.n_flight_angles)


def _sweep_kwargs(config: ExperimentConfig, seed: int, workers: int) -> Dict[str, Any]:
    return {
        "trials": config.evaluation.trials,
        "seed": seed,
        "criterion": SuccessCriterion(config.evaluation.criterion),
        "workers": workers,
        "env_config": config.env,
    }


def _export_map(ctx: RunContext, name: str, success_map: SuccessMap, config: ExperimentConfig,
                surface: SurfaceSpec, geometry=None):
    success_map = smooth_map(success_map, config.evaluation.smoothing_sigma_cells)
    ctx.artifact(write_map_csv(ctx.path(f"{name}.csv"), success_map, ctx.digest, ctx.seed), "success_map")
    ctx.artifact(write_map_sidecar(ctx.path(f"{name}.json"), success_map, geometry or config.geometry, surface,
                                   ctx.digest, ctx.seed), "map_sidecar")
    return success_map


def _angle_tag(angle_deg: float) -> str:
    return f"{angle_deg:g}deg".replace(".", "p")


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(_require(args, "config"))
    seed = _seed(args, config)
    ctx = RunContext("train", config.digest, seed, args.out, config.output_dir)
    logger.info(f"[CLI] training geometry {describe(config.geometry)}")
    env = PerchingEnv(config.geometry, config.training_env)
    metadata = {"config_digest": config.digest, "geometry": config.geometry.to_dict()}
    result = train(env, config.training, seed, run_dir=ctx.run_dir, metadata=metadata)
    ctx.artifact(write_learning_curve(ctx.path("learning_curve.csv"), result.curve, config.digest, seed),
                 "learning_curve")
    if result.best_checkpoint:
        ctx.artifact(result.best_checkpoint, "checkpoint")
    ctx.artifact(result.final_checkpoint, "checkpoint")
    summary = {
        "config_digest": config.digest,
        "seed": seed,
        "episodes": config.training.episodes,
        "plateau_episode": result.plateau_episode,
        "final_four_leg_rate": result.success_rate(config.training.plateau_window),
    }
    with open(ctx.path("training_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    ctx.artifact(ctx.path("training_summary.json"), "summary")
    ctx.finish("success")
    return 0


def cmd_map(args: argparse.Namespace) -> int:
    config = load_config(_require(args, "config"))
    policy = load_policy(_require(args, "checkpoint"))
    seed = _seed(args, config)
    ctx = RunContext("map", config.digest, seed, args.out, config.output_dir)
    for angle in config.surface_angles_deg:
        surface = _surface(config, angle)
        log = ctx.path(f"episodes_{_angle_tag(angle)}.jsonl") if args.episode_log else None
        if log and os.path.exists(log):
            os.remove(log)
        success_map = sweep_success_map(policy, config.geometry, surface, _grid(config, surface.theta_plane),
                                        episode_log=log, **_sweep_kwargs(config, seed, _workers(args)))
        _export_map(ctx, f"success_map_{_angle_tag(angle)}", success_map, config, surface)
        if log:
            ctx.artifact(log, "episode_log")
    ctx.finish("success")
    return 0


def cmd_threshold(args: argparse.Namespace) -> int:
    config = load_config(_require(args, "config"))
    seed = _seed(args, config)
    ctx = RunContext("threshold", config.digest, seed, args.out, config.output_dir)
    sw = config.sweeps
    for angle in config.surface_angles_deg:
        surface = _surface(config, angle)
        curve = threshold_curve(config.geometry, surface, sw.alpha_values, v_step=sw.threshold_v_step,
                                v_max=sw.threshold_v_max, gap_step=sw.threshold_gap_step)
        if not curve.is_non_increasing():
            logger.warning(f"[CLI] threshold curve on {angle:g} deg is not monotone: {curve.v_perp_min}")
        ctx.artifact(write_threshold_csv(ctx.path(f"threshold_{_angle_tag(angle)}.csv"), curve, config.digest, seed),
                     "threshold_curve")
    ctx.finish("success")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    if not args.maps or len(args.maps) != 2:
        raise ConfigError("maps", "compare needs exactly two success-map CSV files")
    path_a, path_b = args.maps
    a, b = read_map_csv(path_a), read_map_csv(path_b)
    digest = hashlib.sha256((file_sha256(path_a) + file_sha256(path_b)).encode()).hexdigest()
    seed = args.seed if args.seed is not None else 0
    ctx = RunContext("compare", digest, seed, args.out, None)
    comparison = compare_maps(a, b)
    header = f"config_digest={digest} seed={seed}"
    ctx.artifact(write_comparison_csv(ctx.path("map_diff.csv"), a, comparison, header), "map_diff")
    logger.info(f"[CLI] mean |diff| {comparison.mean_abs_diff:.4f}, max |diff| {comparison.max_abs_diff:.4f}")
    ctx.finish("success")
    return 0


def cmd_hinge_sweep(args: argparse.Namespace) -> int:
    config = load_config(_require(args, "config"))
    policy = load_policy(_require(args, "checkpoint"))
    seed = _seed(args, config)
    ctx = RunContext("hinge-sweep", config.digest, seed, args.out, config.output_dir)
    angle = args.surface_deg if args.surface_deg is not None else config.surface_angles_deg[0]
    surface = _surface(config, angle)
    maps = hinge_sweep(policy, config.geometry, surface, config.sweeps.stiffness_values, config.sweeps.damping_ratios,
                       _grid(config, surface.theta_plane), **_sweep_kwargs(config, seed, _workers(args)))
    rows = []
    for (k, zeta), success_map in maps.items():
        name = f"hinge_K{k:g}_zeta{zeta:g}_{_angle_tag(angle)}".replace(".", "p")
        _export_map(ctx, name, success_map, config, surface)
        rows.append([f"{k:g}", f"{zeta:g}", f"{success_map.rates.mean():.6f}"])
    _write_summary(ctx, "hinge_summary.csv", ["stiffness_nm_rad", "damping_ratio", "mean_rate"], rows)
    ctx.finish("success")
    return 0


def cmd_alpha_sweep(args: argparse.Namespace) -> int:
    config = load_config(_require(args, "config"))
    policy = load_policy(_require(args, "checkpoint"))
    seed = _seed(args, config)
    ctx = RunContext("alpha-sweep", config.digest, seed, args.out, config.output_dir)
    angle = args.surface_deg if args.surface_deg is not None else config.surface_angles_deg[0]
    surface = _surface(config, angle)
    sw = config.sweeps
    maps = alpha_sweep(policy, config.geometry, surface, sw.alpha_values, _grid(config, surface.theta_plane),
                       **_sweep_kwargs(config, seed, _workers(args)))
    curve = threshold_curve(config.geometry, surface, sw.alpha_values, v_step=sw.threshold_v_step,
                            v_max=sw.threshold_v_max, gap_step=sw.threshold_gap_step)
    rows = []
    for (alpha, success_map), predicted in zip(maps.items(), curve.v_perp_min):
        _export_map(ctx, f"alpha_{alpha:g}_{_angle_tag(angle)}".replace(".", "p"), success_map, config, surface)
        alignment = threshold_alignment(success_map, predicted)
        observed = alignment["observed_v_perp"]
        rows.append([f"{alpha:g}", "above_range" if predicted is None else f"{predicted:.4f}",
                     "none" if observed is None else f"{observed:.4f}", int(alignment["aligned"])])
    _write_summary(ctx, "alpha_alignment.csv", ["alpha_max_rad_s2", "predicted_v_perp", "observed_v_perp", "aligned"],
                   rows)
    ctx.finish("success")
    return 0


def cmd_episode(args: argparse.Namespace) -> int:
    config = load_config(_require(args, "config"))
    policy = load_policy(_require(args, "checkpoint"))
    seed = _seed(args, config)
    ctx = RunContext("episode", config.digest, seed, args.out, config.output_dir)
    ev = config.evaluation
    speed = args.speed if args.speed is not None else ev.episode_speed
    angle_deg = args.angle_deg if args.angle_deg is not None else ev.episode_flight_angle_deg
    surface_deg = args.surface_deg if args.surface_deg is not None else ev.episode_surface_deg
    surface = _surface(config, surface_deg)
    condition = evaluation_condition(speed, math.radians(angle_deg), config.geometry, config.env)
    result, trajectory = run_episode_with_trajectory(policy, condition, surface, config.geometry, seed, config.env)

    path = ctx.path("trajectory.csv")
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest={config.digest} seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in trajectory_rows(trajectory, config.geometry, surface):
            writer.writerow([f"{row[0]:.4f}", f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}", f"{row[4]:.6f}",
                             row[5], f"{row[6]:.6f}", f"{row[7]:.6f}"])
    ctx.artifact(path, "trajectory")
    log = ctx.path("episode.jsonl")
    if os.path.exists(log):
        os.remove(log)
    append_episode_log(log, condition, surface, seed, result)
    ctx.artifact(log, "episode_log")
    logger.info(f"[CLI] episode: legs={result.n_legs}, reward={result.scalar_reward:.3f}, "
                f"outcome={result.outcome.value}")
    ctx.finish("success")
    return 0


def _write_summary(ctx: RunContext, name: str, header: List[str], rows: List[List[Any]]):
    path = ctx.path(name)
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest={ctx.digest} seed={ctx.seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    ctx.artifact(path, "summary")


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "map": cmd_map,
    "threshold": cmd_threshold,
    "compare": cmd_compare,
    "hinge-sweep": cmd_hinge_sweep,
    "alpha-sweep": cmd_alpha_sweep,
    "episode": cmd_episode,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perch", description="Quadrotor dynamic-perching lab")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment JSON")
        p.add_argument("--checkpoint", help="policy checkpoint (.npz)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="output directory (default: timestamped run directory)")
        if name == "compare":
            p.add_argument("maps", nargs="*", help="two success-map CSV files")
        if name in ("hinge-sweep", "alpha-sweep", "episode"):
            p.add_argument("--surface-deg", type=float)
        if name == "map":
            p.add_argument("--episode-log", action="store_true", help="write a JSON-lines episode log per surface")
        if name == "episode":
            p.add_argument("--speed", type=float)
            p.add_argument("--angle-deg", type=float)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level, logging.INFO))
    RunContext.current = None
    try:
        return COMMANDS[args.command](args)
    except PerchError as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        _close_failed_run(e)
        return e.exit_code
    except Exception as e:
        logger.error(f"[CLI] {args.command} failed unexpectedly: {e}", exc_info=True)
        _close_failed_run(e)
        return 1


def _close_failed_run(error: Exception):
    if RunContext.current is not None:
        RunContext.current.finish("failed", f"{type(error).__name__}: {error}")


if __name__ == "__main__":
    sys.exit(main())
