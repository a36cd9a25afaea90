#!/usr/bin/env python3
"""
Tests for the joint routing/scheduling MIP, the HiGHS backend and the feasibility oracle
"""

import json
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from config import build_factory, load_config
from grid import GridError, grid_from_dict, load_distribution_network
from mipcore import (ModelError, PartialAssignment, SolverParams, VariableIndex, binary_vector, build_model,
                     check_feasible, fix_binaries, objective_value, route_of, save_solution, Solution, solve,
                     unfix_binaries)
from pipeline import brute_force_optimum, brute_force_search
from scenariogen import CostParams, EvFleet, JobSchedule, ScenarioSet, assemble_instance
from topology import TransportNetwork, load_transport_network

DATA = Path(__file__).parent / "data"
CONFIGS = Path(__file__).parent / "configs"
RUN_SLOW = os.environ.get("EVJRS_RUN_SLOW") == "1"
EXACT = SolverParams(gap=0.0, time_limit=120.0)


def single_node():
    return TransportNetwork(nodes=(1,), physical_arcs=(), station_nodes=frozenset({1}), name="single")


def make_instance(transport=None, grid=None, evs=1, timesteps=6, schedule=(), congestion=None, pv=None,
                  probabilities=None, load_scale=1.0, costs=CostParams(), fleet=None):
    transport = transport or load_transport_network(DATA / "micro2.json")
    grid = grid or load_distribution_network(DATA / "micro3.json")
    dn = grid.network
    peak_p = np.array([dn.base_load_p.get(b, 0.0) for b in dn.buses]) * load_scale
    peak_q = np.array([dn.base_load_q.get(b, 0.0) for b in dn.buses]) * load_scale
    load_p = np.tile(peak_p[:, None], (1, timesteps))
    load_q = np.tile(peak_q[:, None], (1, timesteps))
    pv = np.zeros((1, len(grid.pv_units), timesteps)) if pv is None else np.asarray(pv, dtype=float)
    if probabilities is None:
        probabilities = np.full(pv.shape[0], 1.0 / pv.shape[0])
    return assemble_instance(transport, grid, fleet or EvFleet.uniform(evs), costs,
                             ScenarioSet(np.asarray(probabilities, dtype=float), pv), load_p, load_q,
                             JobSchedule(tuple(schedule)),
                             congestion if congestion is not None else (0,) * (timesteps - 1), timesteps)


def solar_day(timesteps, peak, scenarios=1, seed=0):
    rng = np.random.default_rng(seed)
    bell = np.clip(np.sin(np.pi * (np.arange(timesteps) / timesteps * 24.0 - 6.0) / 12.0), 0.0, None)
    return peak * bell[None, None, :] * rng.uniform(0.5, 1.0, size=(scenarios, 1, 1))


def idle_values(instance):
    """Every EV idles on its node's stationary arc with no load and no charging."""
    index = VariableIndex.for_instance(instance)
    x = np.zeros(index.size)
    tsn = instance.tsn
    for sc in range(index.scenarios):
        for k in range(index.evs):
            node = instance.schedule.for_ev(k)[0][1] if instance.schedule.for_ev(k) else tsn.transport.nodes[0]
            for s in range(index.timespans):
                x[index.routing(sc, k, tsn.stationary_arc_of[node], s)] = 1.0
            for t in range(index.timesteps):
                x[index.var("E", sc, k, t)] = instance.fleet.e_init[k]
        for b in range(index.buses):
            for t in range(index.timesteps):
                x[index.var("V", sc, b, t)] = instance.grid.network.v_ref
    return index, x


class TestVariableIndex(unittest.TestCase):
    def setUp(self):
        self.instance = make_instance(evs=2, schedule=[(0, 1, 0), (1, 2, 0)], pv=np.zeros((2, 1, 6)))
        self.index = VariableIndex.for_instance(self.instance)

    def test_binary_counts(self):
        self.assertEqual(self.index.arcs, 8)
        self.assertEqual(self.index.routing_count, 2 * 2 * 8 * 5)
        self.assertEqual(self.index.charge_count, 2 * 2 * 1 * 5 * 2)
        self.assertEqual(self.index.d_ev, 8 * 5 + 2 * 1 * 5)
        self.assertEqual(self.index.binary_count, 200)

    def test_bijection(self):
        seen = set()
        for j in range(self.index.size):
            kind, idx = self.index.tuple_of(j)
            self.assertEqual(self.index.var(kind, *idx), j)
            seen.add((kind, idx))
        self.assertEqual(len(seen), self.index.size)
        with self.assertRaises(ModelError):
            self.index.tuple_of(self.index.size)

    def test_ev_major_stride(self):
        self.assertEqual(self.index.routing(0, 1, 0, 0) - self.index.routing(0, 0, 0, 0), self.index.d_ev)
        self.assertEqual(self.index.routing(1, 0, 0, 0), 2 * self.index.d_ev)
        self.assertEqual(self.index.charge(0, 0, 0, 1), 8 * 5)
        self.assertEqual(self.index.discharge(0, 0, 0, 1), 8 * 5 + 5)

    def test_split_shapes(self):
        parts = self.index.split(np.arange(self.index.size, dtype=float))
        self.assertEqual(parts["I"].shape, (2, 2, 5, 8))
        self.assertEqual(parts["Ic"].shape, (2, 2, 1, 5))
        self.assertEqual(parts["E"].shape, (2, 2, 6))
        self.assertEqual(parts["V"].shape, (2, 3, 6))
        self.assertEqual(parts["I"][0, 1, 2, 3], self.index.routing(0, 1, 3, 2))
        self.assertEqual(parts["Pc"][1, 0, 0, 0], self.index.var("Pc", 1, 0, 0, 1))

    def test_stochastic_scales_scenario_blocks(self):
        instance = make_instance(evs=2, schedule=[(0, 1, 0)], pv=np.zeros((5, 1, 6)))
        stochastic = VariableIndex.for_instance(instance)
        deterministic = VariableIndex.for_instance(instance.deterministic(0))
        self.assertEqual(stochastic.binary_count, 5 * deterministic.binary_count)
        for kind, shape in stochastic.shapes.items():
            self.assertEqual(shape[0], 5)
            self.assertEqual(shape[1:], deterministic.shapes[kind][1:])
        self.assertEqual(stochastic.d_ev, deterministic.d_ev)

    def test_empty_fleet(self):
        index = VariableIndex.for_instance(make_instance(evs=0))
        self.assertEqual(index.binary_count, 0)
        self.assertEqual(index.offsets["Pg"], 0)


class TestModelBuild(unittest.TestCase):
    def test_row_families(self):
        model, index = build_model(make_instance(evs=1, schedule=[(0, 1, 0)]))
        families = model.families()
        self.assertEqual(families["route_one"], 5)
        self.assertEqual(families["flow"], 4 * 4)
        self.assertEqual(families["schedule"], 1)
        self.assertEqual(families["energy_balance"], 5)
        self.assertEqual(families["voltage_drop"], 2 * 6)
        self.assertEqual(families["p_balance"], 3 * 6)
        self.assertEqual(model.summary()["binaries"], index.binary_count)

    def test_congestion_closes_direct_arcs(self):
        instance = make_instance(evs=1, congestion=(1,) * 5)
        model, index = build_model(instance)
        direct = [a.id for a in instance.tsn.arcs if a.kind == "direct"]
        for s in range(index.timespans):
            for a in direct:
                self.assertEqual(model.ub[index.routing(0, 0, a, s)], 0.0)

    def test_energy_start_fixed(self):
        model, index = build_model(make_instance(evs=1, fleet=EvFleet.uniform(1, e_init=33.0)))
        e0 = index.var("E", 0, 0, 0)
        self.assertEqual((model.lb[e0], model.ub[e0]), (33.0, 33.0))

    def test_mode_errors(self):
        instance = make_instance(evs=1)
        with self.assertRaises(ModelError):
            build_model(instance, "deterministic")
        with self.assertRaises(ModelError):
            build_model(instance, "robust")

    def test_non_radial_grid_rejected(self):
        with open(DATA / "micro3.json", "r") as f:
            data = json.load(f)
        data["lines"].append([1, 3, 0.01, 0.01])
        with self.assertRaises(GridError):
            build_model(make_instance(evs=0, grid=grid_from_dict(data)))


class TestSolve(unittest.TestCase):
    def test_empty_fleet_zero_load(self):
        instance = make_instance(evs=0, load_scale=0.0)
        model, index = build_model(instance)
        solution = solve(model, params=EXACT)
        self.assertTrue(solution.feasible, solution.status)
        self.assertAlmostEqual(solution.objective, 0.0, places=9)
        parts = index.split(solution.values)
        np.testing.assert_allclose(parts["Pf"], 0.0, atol=1e-9)
        np.testing.assert_allclose(parts["V"], 1.0, atol=1e-7)

    def test_forced_trip_costs_one(self):
        instance = make_instance(evs=1, timesteps=3, schedule=[(0, 1, 0), (0, 2, 1)], load_scale=0.0,
                                 costs=CostParams(travel=1.0, charge=0.0, discharge=0.0))
        model, index = build_model(instance)
        solution = solve(model, params=EXACT)
        self.assertTrue(solution.feasible)
        self.assertAlmostEqual(solution.objective, 1.0, places=6)
        route = route_of(solution, index, 0, 0)
        self.assertEqual(instance.tsn.arcs[route[0][1]].kind, "direct")

    def test_two_bus_voltage_drop(self):
        grid = grid_from_dict({
            "name": "two-bus", "base_kva": 1000.0, "v_ref": 1.0, "slack_bus": 1, "impedance_unit": "pu",
            "buses": [[1, 0, 0], [2, 100, 50]], "lines": [[1, 2, 0.01, 0.02]],
            "generators": [{"bus": 1, "p_min": 0.0, "p_max": 1000.0, "q_min": -1000.0, "q_max": 1000.0,
                            "cost": 0.2}],
            "pv_units": [], "station_map": {"1": 1},
        })
        instance = make_instance(transport=single_node(), grid=grid, evs=0, timesteps=3, pv=np.zeros((1, 0, 3)))
        model, index = build_model(instance)
        solution = solve(model, params=EXACT)
        parts = index.split(solution.values)
        np.testing.assert_allclose(parts["Pf"][0, 0], 100.0, atol=1e-6)
        np.testing.assert_allclose(parts["Qf"][0, 0], 50.0, atol=1e-6)
        np.testing.assert_allclose(parts["V"][0, 1], 1.0 - (100.0 * 0.01 + 50.0 * 0.02) / 1000.0, atol=1e-9)
        self.assertAlmostEqual(solution.objective, 0.2 * 100.0 * 3, places=6)

    def test_fixing_outside_bounds_is_infeasible(self):
        instance = make_instance(evs=1, congestion=(1,) * 5)
        model, index = build_model(instance)
        direct = next(a.id for a in instance.tsn.arcs if a.kind == "direct")
        fixed = fix_binaries(model, {index.routing(0, 0, direct, 0): 1})
        self.assertTrue(fixed.conflicts)
        solution = solve(fixed, params=EXACT)
        self.assertEqual(solution.status, "infeasible")
        self.assertIsNone(solution.values)
        self.assertFalse(solution.feasible)

    def test_conflicting_route_fix_is_infeasible(self):
        instance = make_instance(evs=1, schedule=[(0, 1, 0)])
        model, index = build_model(instance)
        other = instance.tsn.stationary_arc_of[2]
        solution = solve(fix_binaries(model, {index.routing(0, 0, other, 0): 1}), params=EXACT)
        self.assertEqual(solution.status, "infeasible")

    def test_fix_all_binaries_round_trip(self):
        instance = make_instance(evs=1, schedule=[(0, 1, 0), (0, 2, 3)], pv=solar_day(6, 50.0))
        model, index = build_model(instance)
        baseline = solve(model, params=EXACT)
        assignment = PartialAssignment({j: int(v) for j, v in enumerate(binary_vector(baseline, index))})
        again = solve(fix_binaries(model, assignment), params=EXACT)
        self.assertTrue(again.feasible)
        self.assertAlmostEqual(again.objective, baseline.objective, delta=1e-6 * max(1.0, abs(baseline.objective)))

    def test_empty_assignment_and_unfix(self):
        model, index = build_model(make_instance(evs=1))
        same = fix_binaries(model, {})
        np.testing.assert_array_equal(same.lb, model.lb)
        np.testing.assert_array_equal(same.ub, model.ub)
        fixed = fix_binaries(model, {0: 0})
        self.assertEqual(fixed.fixed, {0: 0})
        restored = unfix_binaries(fixed)
        np.testing.assert_array_equal(restored.ub, model.base_ub)
        self.assertEqual(restored.fixed, {})

    def test_assignment_validation(self):
        model, index = build_model(make_instance(evs=1))
        with self.assertRaises(ModelError):
            fix_binaries(model, {index.binary_count: 1})
        with self.assertRaises(ModelError):
            fix_binaries(model, {0: 2})

    def test_save_solution(self):
        tmp = Path(tempfile.mkdtemp())
        try:
            model, index = build_model(make_instance(evs=1, schedule=[(0, 1, 0)]))
            solution = solve(model, params=EXACT)
            path = save_solution(tmp / "solution.json", solution, index)
            with open(path, "r") as f:
                payload = json.load(f)
            self.assertEqual(payload["status"], solution.status)
            self.assertEqual(payload["variable_count"], index.size)
            self.assertIn("E[0,0,0]", payload["values"])
        finally:
            shutil.rmtree(tmp, ignore_errors=True)


class TestFeasibilityOracle(unittest.TestCase):
    def test_solver_solutions_pass(self):
        cases = [
            dict(evs=2, schedule=[(0, 1, 0), (0, 2, 2), (0, 1, 4), (1, 2, 0)], congestion=(0, 0, 1, 0, 0),
                 pv=solar_day(6, 50.0, scenarios=2, seed=1)),
            dict(evs=1, schedule=[(0, 2, 0), (0, 1, 3)], congestion=(1, 1, 0, 0, 0), pv=solar_day(6, 50.0)),
            dict(evs=2, timesteps=8, schedule=[(0, 1, 0), (1, 1, 0), (1, 2, 5)], pv=solar_day(8, 50.0, 2, 3)),
        ]
        for case in cases:
            instance = make_instance(**case)
            model, index = build_model(instance)
            solution = solve(model, params=EXACT)
            self.assertTrue(solution.feasible, solution.status)
            report = check_feasible(instance, solution)
            self.assertTrue(report.ok, report.violations)
            recomputed = objective_value(instance, solution)
            self.assertAlmostEqual(recomputed, solution.objective, delta=1e-6 * max(1.0, abs(solution.objective)))
            self.assert_energy_telescopes(instance, index, solution)

    def assert_energy_telescopes(self, instance, index, solution):
        """Rebuild E from the charge powers and the arcs driven; the closed-form net must match it exactly."""
        parts = index.split(solution.values)
        fleet = instance.fleet
        hours = 24.0 / instance.timesteps
        nsa = sorted(instance.tsn.nsa)
        moving = fleet.p_move * np.rint(parts["I"][..., nsa]).sum(axis=-1)
        charge, discharge = parts["Pc"].sum(axis=2), parts["Pd"].sum(axis=2)
        steps = hours * ((1 - fleet.eta) * charge - (1 + fleet.eta) * (discharge + moving))
        e_init = np.asarray(fleet.e_init, dtype=float)[None, :]
        rebuilt = e_init[..., None] + np.concatenate([np.zeros(steps.shape[:2] + (1,)), np.cumsum(steps, axis=2)],
                                                     axis=2)
        net = hours * ((1 - fleet.eta) * charge.sum(axis=2) - (1 + fleet.eta) * (discharge.sum(axis=2)
                                                                                 + moving.sum(axis=2)))
        np.testing.assert_allclose(rebuilt[..., -1] - e_init, net, rtol=0.0, atol=1e-9)
        np.testing.assert_allclose(parts["Pm"], moving, rtol=0.0, atol=1e-5)
        np.testing.assert_allclose(parts["E"], rebuilt, rtol=0.0, atol=1e-5)

    def test_sampled_micro_instances_pass(self):
        factory = build_factory(load_config(CONFIGS / "micro.json", env={}))
        params = SolverParams(gap=1e-4, time_limit=60.0)
        feasible = 0
        for seed in range(50):
            instance = factory.make_instance(1 + seed % 3, 1 + seed % 2, seed)
            model, index = build_model(instance)
            solution = solve(model, params=params)
            if not solution.feasible:
                continue
            feasible += 1
            report = check_feasible(instance, solution)
            self.assertTrue(report.ok, f"seed {seed}: {report.violations}")
            self.assert_energy_telescopes(instance, index, solution)
        self.assertGreater(feasible, 25)

    def test_perturbed_energy_flagged(self):
        instance = make_instance(evs=1, schedule=[(0, 1, 0)], pv=solar_day(6, 50.0))
        model, index = build_model(instance)
        solution = solve(model, params=EXACT)
        solution.values[index.var("E", 0, 0, 2)] += 1.0
        self.assertIn("energy_balance", check_feasible(instance, solution).failed)

    def test_hand_built_idle_solution(self):
        grid = load_distribution_network(DATA / "micro3.json", {1: 2})
        instance = make_instance(transport=single_node(), grid=grid, evs=1, schedule=[(0, 1, 0)], load_scale=0.0)
        index, x = idle_values(instance)
        report = check_feasible(instance, Solution(x, None, "optimal", 0.0))
        self.assertTrue(report.ok, report.violations)
        self.assertAlmostEqual(objective_value(instance, Solution(x, None, "optimal", 0.0)), 0.0)

    def test_charging_energy_step(self):
        grid = load_distribution_network(DATA / "micro3.json", {1: 2})
        fleet = EvFleet.uniform(1, eta=0.1)
        instance = make_instance(transport=single_node(), grid=grid, evs=1, timesteps=24, schedule=[(0, 1, 0)],
                                 load_scale=0.0, fleet=fleet)
        index, x = idle_values(instance)
        x[index.charge(0, 0, 0, 1)] = 1.0
        x[index.var("Pc", 0, 0, 0, 1)] = 10.0
        for t in range(1, 24):
            x[index.var("E", 0, 0, t)] = 40.0 + 9.0
        x[index.var("Pg", 0, 0, 1)] = 10.0
        x[index.var("Pf", 0, 0, 1)] = 10.0
        v2 = 1.0 - 0.01 * 10.0 / 1000.0
        x[index.var("V", 0, 1, 1)] = v2
        x[index.var("V", 0, 2, 1)] = v2
        report = check_feasible(instance, Solution(x, None, "optimal", 0.0))
        self.assertTrue(report.ok, report.violations)

        for t in range(1, 24):
            x[index.var("E", 0, 0, t)] = 40.0 + 10.0
        self.assertIn("energy_balance", check_feasible(instance, Solution(x, None, "optimal", 0.0)).failed)

    def test_no_values_rejected(self):
        with self.assertRaises(ModelError):
            check_feasible(make_instance(evs=0), Solution(None, None, "infeasible", 0.0))


class TestReferenceOptima(unittest.TestCase):
    @staticmethod
    def reference_case(seed, timesteps=4):
        rng = np.random.default_rng(seed)
        scenarios = 1 + seed % 2
        congestion = tuple(int(v) for v in rng.integers(0, 2, timesteps - 1))
        costs = CostParams(discharge=0.3) if seed % 3 == 0 else CostParams()
        return make_instance(evs=1, timesteps=timesteps, schedule=[(0, 1, 0)], congestion=congestion,
                             pv=solar_day(timesteps, 50.0, scenarios=scenarios, seed=seed),
                             load_scale=0.5 + 0.05 * seed, costs=costs)

    def assert_matches_mip(self, instance):
        result = brute_force_search(instance)
        self.assertGreater(result.lps, 0)
        self.assertIsNotNone(result.objective)
        report = check_feasible(instance, result.solution)
        self.assertTrue(report.ok, report.violations)
        self.assertAlmostEqual(objective_value(instance, result.solution), result.objective,
                               delta=1e-6 * max(1.0, abs(result.objective)))
        solution = solve(build_model(instance)[0], params=EXACT)
        self.assertTrue(solution.feasible, solution.status)
        self.assertAlmostEqual(result.objective, solution.objective, delta=1e-6 * max(1.0, abs(result.objective)))

    def test_brute_force_matches_mip(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                self.assert_matches_mip(self.reference_case(seed))

    @unittest.skipUnless(RUN_SLOW, "set EVJRS_RUN_SLOW=1 for the longer horizons")
    def test_brute_force_matches_mip_longer_horizon(self):
        for seed in range(20, 30):
            with self.subTest(seed=seed):
                self.assert_matches_mip(self.reference_case(seed, timesteps=5))

    def test_perturbed_coefficient_breaks_agreement(self):
        instance = make_instance(evs=1, timesteps=4, schedule=[(0, 1, 0)], pv=solar_day(4, 50.0))
        reference = brute_force_search(instance)
        model, index = build_model(instance)
        generators = {index.var("Pg", 0, 0, t) for t in range(instance.timesteps)}
        touched = 0
        for j, (row, col) in enumerate(zip(model.row_ids, model.col_ids)):
            if col in generators and model.row_family[row] == "p_balance":
                model.coefs[j] = 0.5
                touched += 1
        self.assertEqual(touched, instance.timesteps)
        perturbed = solve(model, params=EXACT)
        self.assertTrue(perturbed.feasible, perturbed.status)
        self.assertGreater(perturbed.objective, reference.objective + 1e-3)
        self.assertFalse(check_feasible(instance, perturbed).ok)

    def test_brute_force_needs_single_ev(self):
        with self.assertRaises(ModelError):
            brute_force_optimum(make_instance(evs=2))

    def test_identical_scenarios_match_deterministic(self):
        day = solar_day(6, 50.0, seed=4)
        instance = make_instance(evs=1, schedule=[(0, 1, 0), (0, 2, 2)], pv=np.concatenate([day, day]),
                                 probabilities=[0.5, 0.5])
        stochastic = solve(build_model(instance)[0], params=EXACT)
        deterministic = solve(build_model(instance, "deterministic", 0)[0], params=EXACT)
        self.assertAlmostEqual(stochastic.objective, deterministic.objective,
                               delta=1e-6 * max(1.0, abs(deterministic.objective)))


if __name__ == "__main__":
    unittest.main()
