import itertools
import math
import random

import pytest

from oracles import all_feasible_trees, min_max_edge_tree
from wpanperf.design import (DesignProblem, DesignStatus, QoS, design_params, extended_sptiep, generate_scenario,
                             hop_bound, lattice_points, lone_packet_delay, problem_from_dict, problem_to_dict,
                             shortest_path_tree, sptiep, tree_hops, tree_max_edge)
from wpanperf.model import ProtocolParams

DP = design_params()


def test_design_payload():
    assert DP.data_tx_symbols == 174
    assert DP.t_tx == 208


def test_lone_packet_without_errors():
    assert lone_packet_delay(DP, 0.0) == 90 + DP.t_tx
    assert lone_packet_delay(ProtocolParams(), 0.0) == 90 + 294


def test_lone_packet_with_errors():
    p = 0.01
    series = sum(p ** k * (1 - p) * (k + 1) for k in range(4)) / (1 - p ** 4)
    assert lone_packet_delay(DP, p) == pytest.approx(series * (90 + DP.t_tx), rel=1e-15)
    assert series == pytest.approx(1.0101, abs=1e-4)


def test_lone_packet_increases_with_per():
    values = [lone_packet_delay(DP, p) for p in (0.0, 0.01, 0.1, 0.3, 0.6, 0.9, 0.99)]
    assert all(b > a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lone_packet_delay(DP, 1.0)


def test_delivery_never_binds():
    h_delivery = math.log(0.95) / math.log(1 - 0.01 ** 4)
    assert h_delivery == pytest.approx(5.13e6, rel=1e-3)


def test_hop_bound_in_the_reference_setting():
    assert hop_bound(QoS(), DP) == 5


def test_hop_bound_infeasible_when_one_hop_is_too_slow():
    assert hop_bound(QoS(d_max_s=0.001), DP) == 0


def test_hop_bound_override():
    assert hop_bound(QoS(), DP, single_hop_delay=62500 * 0.006) == 4


def test_qos_parse():
    q = QoS.parse("p=0.02,pdel=0.9,dmax-ms=30,lambda-pps=2")
    assert (q.p, q.p_del, q.d_max_s, q.lambda_pps) == (0.02, 0.9, 0.030, 2.0)
    for bad in ("p=2", "pdel=0", "dmax-ms=-1", "bogus=1"):
        with pytest.raises(ValueError):
            QoS.parse(bad)


def test_three_node_example():
    problem = DesignProblem({0: (0, 0), 1: (10, 0), 2: (3, 0)}, 0, {(0, 1): 10.0, (0, 2): 3.0, (1, 2): 4.0})
    r = sptiep(problem, h_max=2)
    assert r.tree == {1: 2, 2: 0}
    assert r.max_edge_length == 4.0


def test_star_with_single_hop():
    pos = {0: (0.0, 0.0), 1: (5.0, 0.0), 2: (0.0, 5.0), 3: (-5.0, 0.0)}
    problem = DesignProblem.complete(pos, 0)
    r = sptiep(problem, h_max=1)
    assert r.tree == {1: 0, 2: 0, 3: 0}
    assert r.status is DesignStatus.OPTIMAL_LONE_PACKET
    # the first SPT is already the answer; the next round loses feasibility
    assert len(r.trace) == 2


def test_infeasible_when_first_tree_is_too_deep():
    problem = DesignProblem({0: (0, 0), 1: (1, 0), 2: (2, 0)}, 0, {(0, 1): 1.0, (1, 2): 1.0})
    r = sptiep(problem, h_max=1)
    assert r.status is DesignStatus.INFEASIBLE and r.tree is None
    assert not r.feasible


def test_spt_tie_break():
    edges = {(0, 1): 5.0, (0, 2): 5.0, (1, 3): 2.0, (2, 3): 1.0}
    assert shortest_path_tree([0, 1, 2, 3], 0, edges) == {1: 0, 2: 0, 3: 2}
    edges[(1, 3)] = 1.0
    assert shortest_path_tree([0, 1, 2, 3], 0, edges)[3] == 1
    assert shortest_path_tree([0, 1, 2], 0, {(0, 1): 1.0}) is None


def random_problem(rng, n=None, density=None):
    n = n or rng.randint(2, 7)
    density = density if density is not None else rng.uniform(0.3, 1.0)
    pos = {i: (rng.uniform(0, 50), rng.uniform(0, 50)) for i in range(n + 1)}
    edges = {}
    for u, v in itertools.combinations(range(n + 1), 2):
        if rng.random() < density:
            edges[(u, v)] = round(math.dist(pos[u], pos[v]), 9)
    # keep it connected through a random spanning chain
    order = list(range(n + 1))
    rng.shuffle(order)
    for a, b in zip(order, order[1:]):
        e = (min(a, b), max(a, b))
        edges.setdefault(e, round(math.dist(pos[a], pos[b]), 9))
    return DesignProblem(pos, 0, edges)


@pytest.mark.parametrize("seed", range(40))
def test_sptiep_matches_enumeration(seed):
    rng = random.Random(seed)
    problem = random_problem(rng, n=rng.randint(2, 5))
    h = rng.randint(1, 5)
    r = sptiep(problem, h_max=h)
    best = None
    for tree in all_feasible_trees(problem.nodes, 0, problem.edges, h):
        w = tree_max_edge(tree, problem.edges)
        best = w if best is None else min(best, w)
    if best is None:
        assert r.status is DesignStatus.INFEASIBLE
    else:
        assert r.max_edge_length == best
        assert max(tree_hops(r.tree, 0).values()) <= h


@pytest.mark.parametrize("seed", range(20))
def test_sptiep_trace_properties(seed):
    rng = random.Random(1000 + seed)
    problem = random_problem(rng, n=7)
    r = sptiep(problem, h_max=rng.randint(2, 7))
    feasible = [t.max_edge for t in r.trace if t.verdict == "hop-feasible"]
    assert all(b < a for a, b in zip(feasible, feasible[1:]))
    assert len(r.trace) - 1 <= len(set(problem.edges.values()))


def test_loose_qos_returns_the_lone_packet_tree():
    problem = generate_scenario(4, qos=QoS(p_del=1e-6, d_max_s=1e3))
    base = sptiep(problem)
    r = extended_sptiep(problem)
    assert r.tree == base.tree and r.status is DesignStatus.OPTIMAL_LONE_PACKET


def chain(lam, d_max_s=0.0245):
    pos = {i: (10.0 * i, 0.0) for i in range(6)}
    return DesignProblem.complete(pos, 0, QoS(d_max_s=d_max_s, lambda_pps=lam))


def test_one_augmentation_step():
    problem = chain(4.0)
    r = extended_sptiep(problem)
    aug = [t for t in r.trace if t.phase == "augment"]
    assert [t.verdict for t in aug] == ["qos-violated", "qos-met"]
    lengths = sorted(set(problem.edges.values()))
    k = lengths.index(aug[0].max_edge)
    assert aug[1].max_edge == lengths[k + 1]
    assert r.status is DesignStatus.FEASIBLE_POSITIVE_LOAD
    assert max(r.hop_counts.values()) <= r.h_max


def test_every_evaluated_tree_respects_the_hop_bound():
    problem = chain(15.0)
    r = extended_sptiep(problem)
    aug = [t for t in r.trace if t.phase == "augment"]
    assert len(aug) == 3
    assert all(t.max_hops <= r.h_max for t in aug)
    assert all(b.max_edge > a.max_edge for a, b in zip(aug, aug[1:]))


def test_possibly_infeasible():
    problem = chain(4.0, d_max_s=0.0045)
    r = extended_sptiep(problem, h_max=1)
    assert r.status is DesignStatus.POSSIBLY_INFEASIBLE


def test_failing_evaluator_counts_as_rejection():
    from wpanperf.fixedpoint import FixedPointError

    def broken(model, params):
        raise FixedPointError("boom")
    r = extended_sptiep(chain(1.0), evaluator=broken)
    assert r.status is DesignStatus.POSSIBLY_INFEASIBLE
    assert all(t.verdict == "qos-violated" for t in r.trace if t.phase == "augment")


def test_generator():
    assert len(lattice_points(50, 10)) == 36
    a, b = generate_scenario(3), generate_scenario(3)
    assert a == b
    assert len(a.sources) == 10
    assert len(set(a.positions.values())) == 11
    assert len(a.edges) == 55
    with pytest.raises(ValueError):
        generate_scenario(1, n_sources=36)
    with pytest.raises(ValueError):
        generate_scenario(1, area_m=55)


def test_problem_round_trip():
    problem = generate_scenario(7)
    again = problem_from_dict(problem_to_dict(problem))
    assert again.edges == problem.edges and again.positions == problem.positions
    assert again.params == problem.params


def test_branch_and_bound_agrees_with_enumeration():
    rng = random.Random(5)
    for _ in range(10):
        problem = random_problem(rng, n=4)
        h = rng.randint(1, 4)
        trees = list(all_feasible_trees(problem.nodes, 0, problem.edges, h))
        want = min((tree_max_edge(t, problem.edges) for t in trees), default=None)
        assert min_max_edge_tree(problem.nodes, 0, problem.edges, h) == want
