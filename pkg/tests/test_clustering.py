import itertools
import json

import numpy as np
import pytest

from msetrep.clustering import (
    SINGLETON,
    SPLIT,
    Certificate,
    ClusterInstance,
    CountingOracle,
    build_certificate,
    canonical_partition,
    delta_oracle,
    merge_two,
    random_instance,
    recover_adaptive,
    same_partition,
    split_one,
    swap_one,
    verify_certificate,
)


def brute_delta(labels, a, b):
    """Symmetric-difference size from label counts, written without multisets."""
    ks = set(labels)
    return sum(abs(sum(labels[i] == y for i in a) - sum(labels[i] == y for i in b)) for y in ks)


class TestOracle:
    def test_singletons(self):
        inst = ClusterInstance((1, 1, 2), 2)
        assert delta_oracle(inst, [0], [1]) == 0
        assert delta_oracle(inst, [0], [2]) == 2
        assert delta_oracle(inst, [0, 2], [0, 2]) == 0

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        inst = random_instance(rng, 12, 4)
        for _ in range(300):
            a = rng.choice(12, size=int(rng.integers(0, 6)), replace=False).tolist()
            b = rng.choice(12, size=int(rng.integers(0, 6)), replace=False).tolist()
            assert delta_oracle(inst, a, b) == brute_delta(inst.labels, a, b)

    def test_instance_validation(self):
        with pytest.raises(ValueError):
            ClusterInstance((1, 3), 3)
        with pytest.raises(ValueError):
            ClusterInstance((), 1)


class TestCertificate:
    def test_hand_built_example(self):
        # Objects a, b, c, d = 0..3 with clusters {a,b}, {c}, {d}.
        inst = ClusterInstance((1, 1, 2, 3), 3)
        cert = build_certificate(inst, [(0, 1), (2,), (3,)])
        assert [(q.left, q.right, q.expected, q.kind) for q in cert.queries] == [
            ((0, 1, 2), (3,), 4, SPLIT),
            ((0, 1), (2,), 3, SPLIT),
            ((0,), (1,), 0, SINGLETON),
        ]
        assert verify_certificate(cert, CountingOracle(inst))

    def test_single_cluster(self):
        inst = ClusterInstance((1,) * 5, 1)
        cert = build_certificate(inst, inst.true_clusters())
        assert cert.count(SPLIT) == 0 and cert.count(SINGLETON) == 4

    def test_counts_and_split_answers(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(1, 50))
            k = int(rng.integers(1, min(n, 8) + 1))
            inst = random_instance(rng, n, k)
            cert = build_certificate(inst, inst.true_clusters())
            assert len(cert.queries) == n - 1
            assert cert.count(SPLIT) == k - 1 and cert.count(SINGLETON) == n - k
            for q in cert.queries:
                if q.kind == SPLIT:
                    assert q.expected == len(q.left) + len(q.right)
                    assert not set(q.left) & set(q.right)
            assert verify_certificate(cert, CountingOracle(inst))

    def test_certificate_ignores_labels(self):
        # Only the claimed clustering shapes the queries.
        a = build_certificate(ClusterInstance((1, 1, 2, 2), 2), [(0, 1), (2, 3)])
        b = build_certificate(ClusterInstance((2, 2, 1, 1), 2), [(0, 1), (2, 3)])
        assert a == b

    def test_claim_must_partition(self):
        inst = ClusterInstance((1, 2, 2), 2)
        with pytest.raises(ValueError):
            build_certificate(inst, [(0,), (1,)])
        with pytest.raises(ValueError):
            build_certificate(inst, [(0, 1), (1, 2)])

    def test_json_round_trip(self):
        inst = ClusterInstance((1, 2, 2, 3, 1), 3)
        cert = build_certificate(inst, inst.true_clusters())
        assert Certificate.from_json(cert.to_json()) == cert
        assert ClusterInstance.from_json(inst.to_json()) == inst
        assert "labels" not in json.loads(inst.to_json(include_labels=False))


class TestVerification:
    # Six objects, three clusters: {0, 3}, {1, 4, 5}, {2}.
    inst = ClusterInstance((1, 2, 3, 1, 2, 2), 3)
    truth = [(0, 3), (1, 4, 5), (2,)]

    def check(self, claim):
        return verify_certificate(build_certificate(self.inst, claim), CountingOracle(self.inst))

    def test_truth_accepted(self):
        assert self.check(self.truth)

    def test_merge_rejected_by_singleton_query(self):
        cert = build_certificate(self.inst, [(0, 3, 2), (1, 4, 5)])
        answers = [(q.kind, delta_oracle(self.inst, q.left, q.right), q.expected) for q in cert.queries]
        assert any(kind == SINGLETON and got == 2 for kind, got, _ in answers)
        assert not self.check([(0, 3, 2), (1, 4, 5)])

    def test_split_rejected_by_split_query(self):
        cert = build_certificate(self.inst, [(0, 3), (1,), (4, 5), (2,)])
        short = [q for q in cert.queries if q.kind == SPLIT and delta_oracle(self.inst, q.left, q.right) < q.expected]
        assert short
        assert not self.check([(0, 3), (1,), (4, 5), (2,)])

    def test_every_wrong_partition_rejected(self):
        # Exhaustive over all set partitions of the six objects.
        def partitions(items):
            if not items:
                yield []
                return
            first, rest = items[0], items[1:]
            for p in partitions(rest):
                for i in range(len(p)):
                    yield p[:i] + [[first] + p[i]] + p[i + 1 :]
                yield [[first]] + p

        seen = 0
        for p in partitions(list(range(6))):
            seen += 1
            assert self.check(p) == same_partition(p, self.truth)
        assert seen == 203  # Bell number B6


class TestPerturbations:
    def test_random_perturbations_rejected(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 50))
            k = int(rng.integers(2, min(n, 8) + 1))
            inst = random_instance(rng, n, k)
            truth = inst.true_clusters()
            oracle = CountingOracle(inst)
            wrong = [merge_two(truth, rng)]
            if any(len(c) > 1 for c in truth):
                wrong += [split_one(truth, rng), swap_one(truth, rng)]
            for w in wrong:
                assert not same_partition(w, truth)
                assert not verify_certificate(build_certificate(inst, w), oracle)


class TestAdaptive:
    def test_recovers_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 51))
            k = int(rng.integers(1, min(n, 8) + 1))
            inst = random_instance(rng, n, k)
            oracle = CountingOracle(inst)
            rec = recover_adaptive(inst.objects, oracle)
            assert same_partition(rec.clusters, inst.true_clusters())
            assert rec.queries == oracle.queries <= n * k

    def test_single_object(self):
        inst = ClusterInstance((1,), 1)
        rec = recover_adaptive(inst.objects, CountingOracle(inst))
        assert rec.clusters == [(0,)] and rec.queries == 0

    def test_all_same_label(self):
        inst = ClusterInstance((1,) * 9, 1)
        rec = recover_adaptive(inst.objects, CountingOracle(inst))
        assert rec.clusters == [tuple(range(9))] and rec.queries == 8

    def test_partition_helpers(self):
        assert canonical_partition([(3, 1), (), (2,)]) == [(1, 3), (2,)]
        assert same_partition([(1, 0)], [[0, 1]])
        assert not same_partition([(0,), (1,)], [(0, 1)])
        assert list(itertools.chain(*canonical_partition([(5,), (4, 0)]))) == [0, 4, 5]
