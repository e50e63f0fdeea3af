import dataclasses
import math

import numpy as np
import pytest

from fedtraffic import fl_engine as fl
from fedtraffic import selection as sel
from fedtraffic.errors import DomainError, PartitionError


def gaussian_data(n, d=6, c=4, seed=0, sep=3.0):
    rng = np.random.default_rng(seed)
    return fl.make_gaussian_mixture(rng.integers(0, c, n), d, c, sep, rng)


def tv(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


class TestPartition:
    def test_single_user_gets_everything(self, rng):
        data = gaussian_data(200)
        shards = fl.partition_dataset(data, {7: 0}, fl.Coupling(), rng)
        assert list(shards) == [7]
        assert np.array_equal(shards[7].indices, np.arange(200))
        assert shards[7].label_histogram.sum() == 200

    @pytest.mark.parametrize("trial", range(10))
    def test_disjoint_and_covering(self, trial):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(50, 600))
        k = int(rng.integers(1, 40))
        n_arch = int(rng.integers(1, 5))
        data = gaussian_data(n, seed=trial)
        users = {u: int(rng.integers(0, n_arch)) for u in range(k)}
        coupling = fl.Coupling(float(rng.uniform(0.05, 5)), float(rng.uniform(1, 100)))
        shards = fl.partition_dataset(data, users, coupling, rng, n_archetypes=n_arch)
        allidx = np.concatenate([s.indices for s in shards.values()])
        assert np.array_equal(np.sort(allidx), np.arange(n))
        sizes = [len(s) for s in shards.values()]
        assert max(sizes) - min(sizes) <= 1
        for s in shards.values():
            assert np.array_equal(s.y, data.y[s.indices])
            assert np.array_equal(s.label_histogram, np.bincount(s.y, minlength=4))

    def test_strong_coupling_tracks_archetype_prior(self):
        rng = np.random.default_rng(5)
        c = 5
        labels = np.repeat(np.arange(c), 4000)  # balanced supply
        data = fl.make_gaussian_mixture(labels, 8, c, 2.0, rng)
        users = {u: 0 for u in range(10)}
        coupling = fl.Coupling(alpha_class=1e4, alpha_user=1e4)
        shards = fl.partition_dataset(data, users, coupling, rng, n_archetypes=1)
        for s in shards.values():
            assert tv(s.label_histogram / len(s), np.full(c, 1 / c)) <= 0.05

    def test_users_follow_their_mixture(self):
        rng = np.random.default_rng(11)
        labels = np.repeat(np.arange(4), 3000)
        data = fl.make_gaussian_mixture(labels, 6, 4, 2.0, rng)
        users = {u: u % 2 for u in range(20)}
        mixtures = fl.LabelMixtures(
            np.array([[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]]),
            {u: (np.array([0.5, 0.5, 0, 0]) if u % 2 == 0 else np.array([0, 0, 0.5, 0.5])) for u in users},
        )
        shards = fl.partition_dataset(data, users, fl.Coupling(), rng, mixtures=mixtures)
        for u, s in shards.items():
            assert tv(s.label_histogram / len(s), mixtures.user_dists[u]) < 1e-9

    def test_infeasible(self, rng):
        with pytest.raises(PartitionError):
            fl.partition_dataset(gaussian_data(10), {u: 0 for u in range(5)}, fl.Coupling(), rng, min_shard_size=3)
        with pytest.raises(PartitionError):
            fl.partition_dataset(gaussian_data(10), {}, fl.Coupling(), rng)

    def test_mixtures_dirichlet_coupling(self):
        # with huge alpha_user every member sits on its archetype prior
        rng = np.random.default_rng(3)
        users = {u: u % 3 for u in range(30)}
        mix = fl.draw_label_mixtures(users, 3, 6, fl.Coupling(1.0, 1e7), rng)
        for u, a in users.items():
            assert tv(mix.user_dists[u], mix.archetype_priors[a]) < 0.01

    def test_largest_remainder(self):
        assert fl.largest_remainder([1, 1, 1], 10).tolist() == [4, 3, 3]
        assert fl.largest_remainder([0.5, 0.25, 0.25], 4).tolist() == [2, 1, 1]
        assert fl.largest_remainder([0, 0], 3).sum() == 3
        out = fl.largest_remainder(np.random.default_rng(0).random(17), 1001)
        assert out.sum() == 1001


LAYOUT = fl.Layout(6, 4)


def shard_of(data, uid=0):
    return fl.LocalDataset(uid, np.arange(len(data)), data.X, data.y, np.bincount(data.y, minlength=4))


class TestLocalUpdate:
    def test_zero_epochs_zero_delta(self, rng):
        z = fl.local_update(fl.init_model(LAYOUT), shard_of(gaussian_data(50)), fl.LocalParams(epochs=0), rng)
        assert np.all(z.params == 0)

    def test_full_batch_client_reduces_loss(self, rng):
        data = gaussian_data(300)
        q = fl.init_model(LAYOUT)
        z = fl.local_update(q, shard_of(data), fl.LocalParams(epochs=5, batch_size=0, lr=0.5), rng)
        after = fl.aggregate(q, [z])
        assert fl.evaluate(after, data.X, data.y)[0] < fl.evaluate(q, data.X, data.y)[0]

    def test_identical_shards_identical_deltas(self):
        data = gaussian_data(80)
        q = fl.init_model(LAYOUT)
        hp = fl.LocalParams(epochs=3, batch_size=16, lr=0.1)
        z1 = fl.local_update(q, shard_of(data, 1), hp, np.random.default_rng(9))
        z2 = fl.local_update(q, shard_of(data, 2), hp, np.random.default_rng(9))
        assert np.array_equal(z1.params, z2.params)

    def test_single_full_batch_step_is_gradient_step(self, rng):
        data = gaussian_data(40)
        q = fl.FlModel(np.random.default_rng(1).normal(size=LAYOUT.size), LAYOUT)
        z = fl.local_update(q, shard_of(data), fl.LocalParams(epochs=1, batch_size=0, lr=0.3), rng)
        _, g = reference_loss_grad(q.params, data.X, data.y, 4)
        np.testing.assert_allclose(z.params, -0.3 * g, rtol=1e-12, atol=1e-15)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DomainError):
            fl.local_update(fl.init_model(fl.Layout(5, 4)), shard_of(gaussian_data(10)), fl.LocalParams(), rng)

    def test_divergence_reports_user(self, rng):
        data = gaussian_data(40, sep=1e6)
        with pytest.raises(fl.LocalDivergenceError) as info:
            fl.local_update(fl.init_model(LAYOUT), shard_of(data, 42), fl.LocalParams(epochs=50, lr=1e300), rng)
        assert info.value.user_id == 42


class TestAggregate:
    def test_single_update(self):
        q = fl.FlModel(np.arange(LAYOUT.size, dtype=float), LAYOUT)
        z = fl.FlModel(np.ones(LAYOUT.size), LAYOUT)
        assert np.array_equal(fl.aggregate(q, [z]).params, q.params + 1)

    def test_identical_updates(self):
        q = fl.FlModel(np.zeros(LAYOUT.size), LAYOUT)
        z = fl.FlModel(np.random.default_rng(0).normal(size=LAYOUT.size), LAYOUT)
        np.testing.assert_allclose(fl.aggregate(q, [z] * 7).params, z.params, rtol=1e-15, atol=0)

    def test_zero_updates_identity(self):
        q = fl.FlModel(np.random.default_rng(2).normal(size=LAYOUT.size), LAYOUT)
        zero = fl.FlModel(np.zeros(LAYOUT.size), LAYOUT)
        assert np.array_equal(fl.aggregate(q, [zero] * 3).params, q.params)

    def test_mean_oracle(self):
        r = np.random.default_rng(4)
        q = fl.FlModel(r.normal(size=LAYOUT.size), LAYOUT)
        zs = [fl.FlModel(r.normal(size=LAYOUT.size), LAYOUT) for _ in range(13)]
        expect = [q.params[i] + math.fsum(z.params[i] for z in zs) / 13 for i in range(LAYOUT.size)]
        np.testing.assert_allclose(fl.aggregate(q, zs).params, expect, rtol=0, atol=1e-12)

    def test_weighted(self):
        q = fl.FlModel(np.zeros(LAYOUT.size), LAYOUT)
        a = fl.FlModel(np.ones(LAYOUT.size), LAYOUT)
        b = fl.FlModel(np.full(LAYOUT.size, 4.0), LAYOUT)
        np.testing.assert_allclose(fl.aggregate(q, [a, b], [3, 1]).params, 1.75)

    def test_errors(self):
        q = fl.init_model(LAYOUT)
        with pytest.raises(DomainError):
            fl.aggregate(q, [])
        with pytest.raises(DomainError):
            fl.aggregate(q, [fl.init_model(fl.Layout(6, 3))])


def reference_loss_grad(params, X, y, c):
    """Per-example loop version of the multinomial regression loss."""
    d = X.shape[1]
    W = params[: c * d].reshape(c, d)
    b = params[c * d :]
    gW = np.zeros_like(W)
    gb = np.zeros_like(b)
    total = 0.0
    for x, t in zip(X, y):
        s = W @ x + b
        m = max(s)
        lse = m + math.log(sum(math.exp(v - m) for v in s))
        total += lse - s[t]
        p = np.exp(s - lse)
        p[t] -= 1
        gW += np.outer(p, x)
        gb += p
    n = len(y)
    return total / n, np.concatenate([gW.ravel(), gb]) / n


class TestEvaluate:
    @pytest.mark.parametrize("c", [2, 4, 10])
    def test_zero_params_give_log_c(self, c):
        data = gaussian_data(30, d=12, c=c)
        loss, _ = fl.evaluate(fl.init_model(fl.Layout(12, c)), data.X, data.y)
        assert loss == pytest.approx(math.log(c), rel=1e-14)

    def test_loss_oracle(self):
        data = gaussian_data(25)
        params = np.random.default_rng(8).normal(size=LAYOUT.size)
        loss, grad = fl.loss_and_grad(params, LAYOUT, data.X, data.y)
        ref_loss, ref_grad = reference_loss_grad(params, data.X, data.y, 4)
        assert loss == pytest.approx(ref_loss, rel=1e-12)
        np.testing.assert_allclose(grad, ref_grad, rtol=1e-10, atol=1e-14)
        assert fl.evaluate(fl.FlModel(params, LAYOUT), data.X, data.y)[0] == pytest.approx(ref_loss, rel=1e-12)

    def test_overfit_small_set(self):
        data = gaussian_data(20, sep=4.0)
        model = fl.init_model(LAYOUT)
        for _ in range(2000):
            _, g = fl.loss_and_grad(model.params, LAYOUT, data.X, data.y)
            model.params -= 0.5 * g
        assert fl.evaluate(model, data.X, data.y)[1] == 1.0

    def test_empty(self):
        with pytest.raises(DomainError):
            fl.evaluate(fl.init_model(LAYOUT), np.empty((0, 6)), np.empty(0, dtype=int))

    def test_mlp_gradient_finite_differences(self):
        layout = fl.Layout(5, 3, hidden=4)
        data = gaussian_data(15, d=5, c=3)
        params = fl.init_model(layout, np.random.default_rng(0)).params
        params = params + 0.1 * np.random.default_rng(1).normal(size=params.size)
        _, g = fl.loss_and_grad(params, layout, data.X, data.y)
        h = 1e-6
        fd = np.empty_like(params)
        for i in range(params.size):
            e = np.zeros_like(params)
            e[i] = h
            fd[i] = (fl.loss_and_grad(params + e, layout, data.X, data.y)[0]
                     - fl.loss_and_grad(params - e, layout, data.X, data.y)[0]) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def small_world(seed=0, k=60):
    pop = sel.generate_population(sel.DEFAULT_ARCHETYPES, k, 1.0, seed=seed)
    users = [m.profile for m in pop]
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 1200)
    data = fl.make_gaussian_mixture(labels, 6, 4, 2.0, rng)
    eval_data = fl.make_gaussian_mixture(rng.integers(0, 4, 300), 6, 4, 2.0, rng)
    arch = {u.user_id: u.true_archetype for u in users}
    shards = fl.partition_dataset(data, arch, fl.Coupling(), rng, n_archetypes=6)
    assignments = [sel.ClusterAssignment(u.user_id, u.true_archetype, np.eye(6)[u.true_archetype]) for u in users]
    return shards, users, assignments, eval_data


class TestRunTraining:
    HP = fl.FlParams(rounds=6, k_select=8, local=fl.LocalParams(epochs=1, batch_size=8, lr=0.1), target_accuracy=1.1)

    @pytest.mark.parametrize("strategy", fl.STRATEGIES)
    def test_deterministic(self, strategy):
        shards, users, assignments, ev = small_world()
        runs = [fl.run_training(strategy, shards, users, assignments, ev, fl.init_model(LAYOUT), self.HP, seed=3)
                for _ in range(2)]
        assert [r.csv_row() for r in runs[0]] == [r.csv_row() for r in runs[1]]
        assert [r.round_index for r in runs[0]] == list(range(1, 7))

    def test_workers_do_not_change_results(self):
        shards, users, assignments, ev = small_world()
        one = fl.run_training("random", shards, users, assignments, ev, fl.init_model(LAYOUT), self.HP, 3, workers=1)
        four = fl.run_training("random", shards, users, assignments, ev, fl.init_model(LAYOUT), self.HP, 3, workers=4)
        assert [r.csv_row() for r in one] == [r.csv_row() for r in four]

    def test_cluster_cohorts_are_pure(self):
        shards, users, assignments, ev = small_world()
        by_id = {a.user_id: a.predicted_class for a in assignments}
        hist = fl.run_training("cluster", shards, users, assignments, ev, fl.init_model(LAYOUT), self.HP, 3)
        for r in hist:
            assert len({by_id[u] for u in r.selected_ids}) == 1
            assert 0 < len(r.selected_ids) <= 8

    def test_early_stop(self):
        shards, users, assignments, ev = small_world()
        hp = dataclasses.replace(self.HP, target_accuracy=0.0)
        hist = fl.run_training("random", shards, users, assignments, ev, fl.init_model(LAYOUT), hp, 3)
        assert len(hist) == 1

    def test_unknown_strategy(self):
        shards, users, assignments, ev = small_world()
        with pytest.raises(DomainError):
            fl.run_training("greedy", shards, users, assignments, ev, fl.init_model(LAYOUT), self.HP, 3)

    def test_csv_row(self):
        m = fl.RoundMetrics(2, "cluster", (1, 4), 0.5, 0.75, 0.6, 0.7, 0.125)
        assert m.csv_row() == "2,cluster,0.5,0.75,0.125,2"
        assert fl.METRICS_HEADER.count(",") == m.csv_row().count(",")
