#!/usr/bin/env python3
"""
Perching Lab System Validation Script
Desk-scale acceptance checks: reward table, gradients, physics oracles,
trainer sanity, perching run, threshold model, scale invariance, hinge
effects and artifact determinism.
"""

import os
import sys
import json
import math
import logging
import tempfile
from dataclasses import replace
from datetime import datetime

import numpy as np

from robot_geometry import get_preset, scale_geometry, derive_dimensionless
from sim_core import SurfaceSpec, pinned_state, step_swing, swing_energy, PadSide, Phase
from perching_env import EnvConfig, PerchingEnv, compute_reward
from policy_network import ACTOR_LAYERS, CRITIC_LAYERS, gradient_error, init_mlp, numeric_gradients
from sac_trainer import SacConfig, train, actor_loss_and_grads, critic_loss_and_grads, temperature_loss_and_grad
from synthetic_env import TriggerTimingEnv, trigger_accuracy
from landing_analysis import (
    MapGrid,
    alpha_sweep,
    brute_force_threshold,
    compare_maps,
    hinge_sweep,
    mean_rate_in_band,
    predict_velocity_threshold,
    sweep_success_map,
    threshold_alignment,
    trigger_distance_grid,
)
import app

logger = logging.getLogger(__name__)


class PerchValidator:
    def __init__(self, workers=1, quick=False, seed=0):
        self.workers = workers
        self.quick = quick
        self.seed = seed
        self.test_results = []
        self.geometry = get_preset("source_one_semi_narrow_short")
        self.ceiling = SurfaceSpec(0.0)
        self.policy = None
        self.ceiling_map = None

    def log_test(self, test_name, status, message, details=None):
        """Log test results"""
        result = {
            'test': test_name,
            'status': status,
            'message': message,
            'timestamp': datetime.now().isoformat(),
            'details': details
        }
        self.test_results.append(result)

        status_icon = "✅" if status == "PASS" else "❌" if status == "FAIL" else "⚠️"
        print(f"{status_icon} {test_name}: {message}")

    def grid(self, n=10):
        return MapGrid.linear((0.5, 5.0), n, (5.0, 90.0), n)

    # ------------------------------------------------------------------
    def test_reward_table(self):
        """Hand-evaluated reward cases"""
        phi_min = math.pi / 2
        cases = [
            (dict(tau_trg=-0.05, min_d_pad=0.0, phi_impact=None, n_legs=0, body_or_prop_contact=False), 0.1 * 1 + 0.4 * 1),
            (dict(tau_trg=0.0, min_d_pad=0.0, phi_impact=None, n_legs=0, body_or_prop_contact=False), 0.1 + 0.4),
            (dict(tau_trg=0.2, min_d_pad=0.1, phi_impact=None, n_legs=0, body_or_prop_contact=True),
             0.1 * math.exp(-1.0) + 0.4 * math.exp(-1.0) + 2.0 * -0.25),
        ]
        worst = 0.0
        for kwargs, expected in cases:
            value = compute_reward(phi_min=phi_min, **kwargs).scalar
            worst = max(worst, abs(value - expected))
        r = compute_reward(0.1, -0.01, math.pi / 4, phi_min, 2, True,
                           leg_vector=np.array([1.0, 0.0]), touchdown_velocity=np.array([0.0, 1.0]))
        worst = max(worst, abs(r.r_phi - 0.25), abs(r.r_legs - 0.25), abs(r.r_gravity - 1.0), abs(r.r_momentum - 1.0))
        self.log_test("Reward table", "PASS" if worst < 1e-9 else "FAIL", f"max error {worst:.2e}")

    def test_gradients(self, trials=10):
        """Every actor, critic and temperature gradient against central differences"""
        rng = np.random.default_rng(self.seed)
        worst = 0.0
        for _ in range(trials):
            actor = init_mlp(ACTOR_LAYERS, rng, output_scale=0.5)
            c1, c2 = init_mlp(CRITIC_LAYERS, rng, 0.5), init_mlp(CRITIC_LAYERS, rng, 0.5)
            obs = rng.normal(size=(4, 4))
            eps = rng.normal(size=(4, 2))
            _, grads, log_probs = actor_loss_and_grads(actor, c1, c2, obs, eps, 0.3, 90.0)
            numeric = numeric_gradients(lambda: actor_loss_and_grads(actor, c1, c2, obs, eps, 0.3, 90.0)[0],
                                        actor.arrays())
            worst = max(worst, gradient_error(grads.arrays(), numeric))

            targets = rng.normal(size=4)
            actions = rng.uniform(-1, 1, size=(4, 2))
            for critic in (c1, c2):
                _, cg = critic_loss_and_grads(critic, obs, actions, targets)
                numeric = numeric_gradients(lambda: critic_loss_and_grads(critic, obs, actions, targets)[0],
                                            critic.arrays())
                worst = max(worst, gradient_error(cg.arrays(), numeric))

            log_alpha = np.array([math.log(0.3)])
            _, grad = temperature_loss_and_grad(float(log_alpha[0]), log_probs, -2.0)
            numeric = numeric_gradients(lambda: temperature_loss_and_grad(float(log_alpha[0]), log_probs, -2.0)[0],
                                        [log_alpha])
            worst = max(worst, gradient_error([np.array([grad])], numeric))
        self.log_test("Gradient suite", "PASS" if worst < 1e-4 else "FAIL", f"max relative error {worst:.2e}")

    def test_physics(self):
        geom = replace(self.geometry, hip_stiffness=0.0, hip_damping_ratio=0.0)
        state = pinned_state(geom, PadSide.FRONT, np.zeros(2), 2.0)
        e0 = swing_energy(state, geom)
        surface = SurfaceSpec(0.0, anchor_point=(0.0, 10.0))
        drift = 0.0
        for _ in range(2000):
            state = replace(step_swing(state, geom, surface, 1e-3), phase=Phase.SWING)
            drift = max(drift, abs(swing_energy(state, geom) - e0))
        scale = geom.mass * 9.81 * derive_dimensionless(geom).l_eff
        rel = drift / scale
        self.log_test("Undamped swing energy", "PASS" if rel < 5e-3 else "FAIL", f"relative drift {rel:.2e}")

    def test_trainer_toy(self):
        env = TriggerTimingEnv()
        result = train(env, SacConfig(episodes=300, replay_scheme="per_tick", updates_per_episode=None, log_every=0),
                       self.seed)
        accuracy = trigger_accuracy(result.agent.policy(deterministic=True), 200, self.seed)
        status = "PASS" if accuracy > 0.95 else "WARN" if accuracy > 0.8 else "FAIL"
        self.log_test("Trainer toy task", status, f"trigger accuracy {accuracy:.3f}")

    def test_perching_run(self):
        episodes = 300 if self.quick else 1500
        config = EnvConfig(surface_angles_deg=(0.0,), randomize_start_gap=True)
        result = train(PerchingEnv(self.geometry, config), SacConfig(episodes=episodes, log_every=100), self.seed)
        self.policy = result.agent.policy(deterministic=True)
        plateau = result.plateau_episode
        self.log_test("Perching plateau", "PASS" if plateau is not None else "WARN",
                      f"plateau at episode {plateau}", {"final_rate": result.success_rate()})
        self.ceiling_map = sweep_success_map(self.policy, self.geometry, self.ceiling, self.grid(), trials=5,
                                             seed=self.seed, workers=self.workers)
        vertical = self.ceiling_map.rates[:, -1]
        boundary = vertical[0] == 0.0 and vertical.max() > 0.0
        angled = mean_rate_in_band(self.ceiling_map, (40.0, 75.0))
        straight = mean_rate_in_band(self.ceiling_map, (85.0, 90.0))
        self.log_test("Velocity boundary", "PASS" if boundary else "WARN", f"vertical column {vertical.tolist()}")
        self.log_test("Tangential benefit", "PASS" if angled > straight else "WARN",
                      f"angled {angled:.2f} vs vertical {straight:.2f}")

    def test_threshold(self):
        values = [predict_velocity_threshold(self.geometry, a, self.ceiling) for a in (30.0, 60.0, 90.0)]
        finite = [math.inf if v is None else v for v in values]
        monotone = finite[0] >= finite[1] >= finite[2]
        self.log_test("Threshold monotone", "PASS" if monotone else "FAIL", f"thresholds {values}")
        predicted = values[-1]
        if predicted is not None:
            v_values = np.arange(max(0.05, predicted - 0.2), predicted + 0.15, 0.05)
            oracle = brute_force_threshold(self.geometry, 90.0, self.ceiling, v_values,
                                           trigger_distance_grid(self.geometry, self.ceiling, 0.005, 0.6))
            agree = oracle is not None and abs(oracle - predicted) <= 0.05 + 1e-9
            self.log_test("Threshold oracle", "PASS" if agree else "FAIL", f"predicted {predicted}, oracle {oracle}")
        if self.ceiling_map is not None:
            alignment = threshold_alignment(self.ceiling_map, predicted)
            self.log_test("Threshold alignment", "PASS" if alignment["aligned"] else "WARN",
                          f"observed {alignment['observed_v_perp']}, predicted {predicted}")

    def test_scale_invariance(self):
        if self.policy is None:
            self.log_test("Scale invariance", "WARN", "skipped: no trained policy")
            return
        small = scale_geometry(self.geometry, 7.0 / 12.0)
        small_map = sweep_success_map(self.policy, small, self.ceiling, self.grid(), trials=5, seed=self.seed,
                                      workers=self.workers)
        diff = compare_maps(self.ceiling_map, small_map).mean_abs_diff
        self.log_test("Scale invariance", "PASS" if diff <= 0.15 else "FAIL", f"mean |diff| {diff:.3f}")

    def test_hinge_effects(self):
        if self.policy is None:
            self.log_test("Hinge effects", "WARN", "skipped: no trained policy")
            return
        grid = self.grid(6)
        stiff = hinge_sweep(self.policy, self.geometry, self.ceiling, [0.4, 1.4, 8.5], [self.geometry.hip_damping_ratio],
                            grid, trials=5, seed=self.seed, workers=self.workers)
        means = [m.rates.mean() for m in stiff.values()]
        spread = max(means) - min(means)
        self.log_test("Stiffness effect", "PASS" if spread < 0.1 else "WARN", f"mean-rate spread {spread:.3f}")
        near_vertical = MapGrid(grid.speeds, tuple(np.radians([75.0, 80.0, 85.0, 90.0]).tolist()))
        damp = hinge_sweep(self.policy, self.geometry, self.ceiling, [self.geometry.hip_stiffness], [0.3, 2.0],
                           near_vertical, trials=20, seed=self.seed, workers=self.workers)
        low, high = [m.rates.mean() for m in damp.values()]
        self.log_test("Damping effect", "PASS" if low - high >= 0.2 else "WARN",
                      f"zeta 0.3: {low:.2f}, zeta 2.0: {high:.2f}")
        alpha_maps = alpha_sweep(self.policy, self.geometry, self.ceiling, [30.0, 90.0], grid, trials=3,
                                 seed=self.seed, workers=self.workers)
        rates = [m.rates.mean() for m in alpha_maps.values()]
        self.log_test("Alpha limit effect", "PASS" if rates[0] <= rates[1] + 0.05 else "WARN",
                      f"alpha 30: {rates[0]:.2f}, alpha 90: {rates[1]:.2f}")

    def test_determinism(self):
        config = {"seed": 3, "robot": {"preset": "source_one_semi_narrow_short"}, "surfaces": {"angles_deg": [0.0]},
                  "sweeps": {"alpha_max_rad_s2": [60.0, 90.0]}}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            with open(path, "w") as f:
                json.dump(config, f)
            outputs = []
            for run in ("a", "b"):
                out = os.path.join(tmp, run)
                code = app.main(["threshold", "--config", path, "--out", out])
                with open(os.path.join(out, "threshold_0deg.csv"), "rb") as f:
                    outputs.append((code, f.read()))
        same = outputs[0] == outputs[1] and outputs[0][0] == 0
        self.log_test("Artifact determinism", "PASS" if same else "FAIL", "threshold CSV byte-identical" if same
                      else "threshold CSV differs between runs")

    def run_all_tests(self):
        """Run the acceptance checks"""
        print("🚀 Starting Perching Lab Validation")
        print("=" * 50)
        print("\n📐 Exact checks...")
        self.test_reward_table()
        self.test_gradients()
        self.test_physics()
        print("\n🧠 Trainer checks...")
        self.test_trainer_toy()
        self.test_perching_run()
        print("\n📈 Analysis checks...")
        self.test_threshold()
        if not self.quick:
            self.test_scale_invariance()
            self.test_hinge_effects()
        self.test_determinism()
        self.generate_summary()

    def generate_summary(self):
        """Generate test summary"""
        print("\n" + "=" * 50)
        print("📊 VALIDATION SUMMARY")
        print("=" * 50)
        passed = len([r for r in self.test_results if r['status'] == 'PASS'])
        warned = len([r for r in self.test_results if r['status'] == 'WARN'])
        failed = len([r for r in self.test_results if r['status'] == 'FAIL'])
        print(f"✅ Passed: {passed}")
        print(f"⚠️  Warnings: {warned}")
        print(f"❌ Failed: {failed}")
        self.save_results()
        return failed

    def save_results(self):
        """Save detailed test results"""
        try:
            with open('validation_results.json', 'w') as f:
                json.dump({
                    'validation_timestamp': datetime.now().isoformat(),
                    'test_results': self.test_results,
                }, f, indent=2, default=str)
            print("\n💾 Detailed results saved to validation_results.json")
        except OSError as e:
            print(f"\n⚠️  Could not save results: {e}")


def main():
    """Main validation function"""
    import argparse

    parser = argparse.ArgumentParser(description='Validate the perching lab')
    parser.add_argument('--workers', type=int, default=os.cpu_count() or 1)
    parser.add_argument('--quick', action='store_true', help='short training, skip scale and hinge sweeps')
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO)
    validator = PerchValidator(args.workers, args.quick, args.seed)
    validator.run_all_tests()
    failed = len([r for r in validator.test_results if r['status'] == 'FAIL'])
    sys.exit(1 if failed else 0)


if __name__ == '__main__':
    main()
