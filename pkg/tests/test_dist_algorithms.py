import numpy as np
import pytest

from cagnet_sim.dist import DistributedTrainer, ReplicaDivergenceError, block_range, gather_result
from cagnet_sim.dist.layouts import block_ranges, default_block, panel_bounds
from cagnet_sim.gnn_reference import init_glorot, train_serial
from cagnet_sim.sparse_core import permute_random

from conftest import make_dataset, rel

CONFIGS = [
    ("1d", 2, None),
    ("1d", 4, None),
    ("1.5d", 4, 2),
    ("1.5d", 8, 2),
    ("1.5d", 16, 4),
    ("2d", 4, None),
    ("2d", 9, None),
    ("3d", 8, None),
]


def run_pair(ds, dims, strategy, P, c=None, epochs=2, seed=3, **kw):
    model = init_glorot(dims, seed=seed, learning_rate=0.5)
    _, _, serial = train_serial(ds, model, epochs, record=True)
    trainer = DistributedTrainer(ds, model, strategy, P, c=c, **kw)
    return serial, trainer.train(epochs), trainer


def assert_matches(serial, dist, tol):
    for s, d in zip(serial, dist):
        assert abs(s.loss - d.loss) <= tol * abs(s.loss)
        assert rel(d.output, s.output) < tol
        for a, b in zip(d.gradients, s.gradients):
            assert rel(a, b) < tol
        for a, b in zip(d.weights, s.weights):
            assert rel(a, b) < tol


def assert_bitwise(serial, dist):
    for s, d in zip(serial, dist):
        assert np.float64(s.loss).tobytes() == np.float64(d.loss).tobytes()
        assert s.output.tobytes() == d.output.tobytes()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(s.gradients, d.gradients))
        assert all(a.tobytes() == b.tobytes() for a, b in zip(s.weights, d.weights))


class TestLayouts:
    def test_ceiling_rule(self):
        assert block_ranges(4, 2) == [(0, 2), (2, 4)]
        assert block_ranges(5, 2) == [(0, 3), (3, 5)]
        assert block_ranges(5, 4) == [(0, 2), (2, 4), (4, 5), (5, 5)]

    def test_blocks_cover_rows(self):
        for n in range(0, 20):
            for parts in range(1, 7):
                rows = [i for a, b in block_ranges(n, parts) for i in range(a, b)]
                assert rows == list(range(n))
        assert block_range(10, 3, 2) == (8, 10)

    def test_panels_and_default_block(self):
        assert panel_bounds(7, 3) == [(0, 3), (3, 6), (6, 7)]
        assert default_block([8, 4, 0, 12]) == 4

    @pytest.mark.parametrize("strategy,P,c", CONFIGS + [("2d", 1, None)])
    def test_distribute_then_gather_is_identity(self, strategy, P, c):
        ds = make_dataset(n=13, d=4, seed=2, f0=8)
        trainer = DistributedTrainer(ds, init_glorot((8, 8, 4), seed=1), strategy, P, c=c)
        assert gather_result(trainer.distribute_features(ds.features)).tobytes() == ds.features.tobytes()

    def test_corrupted_replica_names_rank(self):
        ds = make_dataset(n=16, seed=2)
        trainer = DistributedTrainer(ds, init_glorot((16, 8, 4), seed=1), "1.5d", 4, c=2)
        blocks = [st.h0.copy() for st in trainer.states]
        blocks[3][0, 0] += 1e-9
        with pytest.raises(ReplicaDivergenceError, match="ranks 2 and 3") as err:
            gather_result(trainer.dense("H^0", blocks, 16))
        assert err.value.ranks == (2, 3)


@pytest.mark.parametrize("strategy", ["1d", "1.5d", "2d", "3d"])
def test_single_rank_is_serial_bitwise(strategy):
    ds = make_dataset(n=16, seed=4)
    serial, dist, _ = run_pair(ds, (16, 8, 4), strategy, 1)
    assert_bitwise(serial, dist)
    assert all(e.ledger.total_words() == 0 for e in dist)


@pytest.mark.parametrize("undirected", [False, True])
@pytest.mark.parametrize("strategy,P,c", CONFIGS)
def test_matches_serial(strategy, P, c, undirected):
    ds = make_dataset(n=16, d=4, seed=5, undirected=undirected, train_every=2)
    serial, dist, _ = run_pair(ds, (16, 8, 4), strategy, P, c)
    assert_matches(serial, dist, 1e-10)
    assert all(e.ledger.total_words() > 0 for e in dist)


@pytest.mark.parametrize("strategy,P,c", [("1d", 4, None), ("1.5d", 8, 2), ("2d", 9, None), ("3d", 8, None)])
def test_ragged_sizes(strategy, P, c):
    # n and widths that do not divide evenly across the grid
    ds = make_dataset(n=13, d=4, seed=6, f0=6)
    serial, dist, _ = run_pair(ds, (6, 10, 4), strategy, P, c)
    assert_matches(serial, dist, 1e-10)


def test_four_layers_three_d():
    ds = make_dataset(n=16, d=4, seed=7, f0=8)
    serial, dist, _ = run_pair(ds, (8, 8, 6, 4), "3d", 8)
    assert_matches(serial, dist, 1e-10)


def test_permuted_input_still_matches():
    ds, _ = permute_random(make_dataset(n=16, seed=8), seed=9)
    serial, dist, _ = run_pair(ds, (16, 8, 4), "2d", 4)
    assert_matches(serial, dist, 1e-10)


def test_one_five_d_with_unit_replication_is_one_d_bitwise():
    ds = make_dataset(n=16, seed=9)
    _, one_d, t1 = run_pair(ds, (16, 8, 4), "1d", 4)
    _, one_five, t2 = run_pair(ds, (16, 8, 4), "1.5d", 4, c=1)
    assert_bitwise(one_d, one_five)
    assert t1.runtime.ledger.counts.tolist() == t2.runtime.ledger.counts.tolist()


def test_cross_strategy_losses_agree():
    ds = make_dataset(n=16, seed=10)
    _, a, _ = run_pair(ds, (16, 8, 4), "1d", 2, epochs=3)
    _, b, _ = run_pair(ds, (16, 8, 4), "1.5d", 4, c=2, epochs=3)
    assert all(abs(x.loss - y.loss) < 1e-8 for x, y in zip(a, b))


@pytest.mark.parametrize("b", [1, 2, 4])
def test_two_d_panel_width_does_not_change_bits(b):
    ds = make_dataset(n=16, seed=11)
    _, ref, _ = run_pair(ds, (16, 8, 4), "2d", 4)
    _, got, _ = run_pair(ds, (16, 8, 4), "2d", 4, block=b)
    assert_bitwise(ref, got)


class TestLedgerShape:
    def test_one_d_forward_broadcast_tally(self):
        ds = make_dataset(n=10, seed=12, f0=6)
        _, _, trainer = run_pair(ds, (6, 6, 4), "1d", 2, epochs=1)
        led = trainer.runtime.tag_ledgers["fw1.H"]
        # blocks of 5 rows by 6 columns, each broadcast to one peer
        assert sum(led.per_rank("dbcast", "words")) == 2 * 30 * 1

    def test_one_d_weight_gradient_reduce(self):
        ds = make_dataset(n=16, seed=13)
        _, _, trainer = run_pair(ds, (16, 8, 4), "1d", 4, epochs=1)
        assert trainer.runtime.tag_ledgers["bw1.Y"].per_rank("reduce", "volume_words") == [16 * 8] * 4
        assert trainer.runtime.tag_ledgers["bw2.Y"].per_rank("reduce", "volume_words") == [8 * 4] * 4

    @pytest.mark.parametrize("strategy,P,c", CONFIGS)
    def test_sparse_broadcasts_only_in_two_and_three_d(self, strategy, P, c):
        ds = make_dataset(n=16, seed=14)
        _, dist, trainer = run_pair(ds, (16, 8, 4), strategy, P, c, epochs=1)
        sbcast = sum(dist[0].ledger.per_rank("sbcast", "words"))
        assert (sbcast > 0) == (strategy in ("2d", "3d"))
        assert sum(trainer.setup_ledger.per_rank("sbcast", "words")) >= 0

    def test_symmetric_graph_skips_setup_exchange(self):
        ds = make_dataset(n=16, seed=15, undirected=True)
        trainer = DistributedTrainer(ds, init_glorot((16, 8, 4), seed=1), "2d", 4)
        assert trainer.setup_ledger.total_words() == 0
        directed = DistributedTrainer(make_dataset(n=16, seed=15), init_glorot((16, 8, 4), seed=1), "2d", 4)
        assert directed.setup_ledger.total_words() > 0


class TestValidation:
    def test_three_d_width_must_divide(self):
        ds = make_dataset(n=16, seed=1, f0=5)
        with pytest.raises(ValueError, match="divisible"):
            DistributedTrainer(ds, init_glorot((5, 8, 4), seed=1), "3d", 8)

    def test_block_rejected_for_block_row(self):
        with pytest.raises(ValueError, match="block"):
            DistributedTrainer(make_dataset(), init_glorot((16, 8, 4), seed=1), "1d", 2, block=2)

    def test_block_must_divide_widths(self):
        with pytest.raises(ValueError, match="divide"):
            DistributedTrainer(make_dataset(), init_glorot((16, 8, 4), seed=1), "2d", 4, block=3)

    def test_bad_grid(self):
        with pytest.raises(ValueError, match="square"):
            DistributedTrainer(make_dataset(), init_glorot((16, 8, 4), seed=1), "2d", 8)
        with pytest.raises(ValueError, match="1.5d only"):
            DistributedTrainer(make_dataset(), init_glorot((16, 8, 4), seed=1), "2d", 4, c=2)
        with pytest.raises(ValueError, match="unknown strategy"):
            DistributedTrainer(make_dataset(), init_glorot((16, 8, 4), seed=1), "4d", 4)

    def test_replication_bounded_by_grid(self):
        with pytest.raises(ValueError, match="c\\^2"):
            DistributedTrainer(make_dataset(), init_glorot((16, 8, 4), seed=1), "1.5d", 8, c=4)

    def test_feature_width_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            DistributedTrainer(make_dataset(f0=10), init_glorot((16, 8, 4), seed=1), "1d", 2)
