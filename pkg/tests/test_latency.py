from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvsim.core import PlacementMatrix, SystemProfile, per_layer_compute
from kvsim.latency import (
    DimensionMismatch,
    TransferTask,
    batch_decode_latency,
    batch_decode_latency_fast,
    blocks_to_fetch,
    capacity_check,
    prefetch_buffer_requirement,
    reconfiguration_delta,
    _simulate_stalls,
)

from conftest import make_request
from oracles import quantum_latency


def _profile(num_layers=9, comp=1.0, bw=3.0, budget=70):
    return SystemProfile(num_layers, comp, 0.0, bw, budget, 16)


def _placement_a(ids=(0, 1), num_layers=9):
    return PlacementMatrix.from_strides(list(ids), num_layers, [3] * len(ids))


class TestBlocksToFetch:
    def test_all_resident(self, fig3_batch_step1):
        pm = PlacementMatrix.all_resident([0, 1], 9)
        assert blocks_to_fetch(pm, fig3_batch_step1) == 0

    def test_uniform_offload_three_layers(self, fig3_batch_step1):
        assert blocks_to_fetch(_placement_a(), fig3_batch_step1) == 27

    def test_single_request_full_offload(self):
        batch = [make_request(0, blocks=3)]
        pm = PlacementMatrix.all_offloaded([0], 9)
        assert blocks_to_fetch(pm, batch) == 27

    def test_dimension_mismatch(self, fig3_batch_step1):
        pm = PlacementMatrix.all_resident([0], 9)
        with pytest.raises(DimensionMismatch):
            blocks_to_fetch(pm, fig3_batch_step1)


class TestPrefetchBuffer:
    def test_all_resident(self, fig3_batch_step1):
        pm = PlacementMatrix.all_resident([0, 1], 9)
        assert prefetch_buffer_requirement(pm, fig3_batch_step1) == 0

    def test_aligned_offloads(self, fig3_batch_step1):
        assert prefetch_buffer_requirement(_placement_a(), fig3_batch_step1) == 9

    def test_disjoint_offloads(self, fig3_batch_step16):
        pm = PlacementMatrix.from_strides([0, 1], 9, [4, 3])
        assert prefetch_buffer_requirement(pm, fig3_batch_step16) == 6


class TestCapacityCheck:
    def test_overcommitted_mixed_placement(self, fig3_batch_step16):
        pm = PlacementMatrix(
            (0, 1), 9, (PlacementMatrix.all_resident([0], 9).rows[0],
                        PlacementMatrix.from_strides([1], 9, [3]).rows[0])
        )
        report = capacity_check(pm, fig3_batch_step16, 70)
        assert (report.resident_blocks, report.prefetch_buffer) == (72, 6)
        assert not report.feasible

    def test_exactly_at_budget(self, fig3_batch_step16):
        pm = PlacementMatrix.from_strides([0, 1], 9, [4, 3])
        report = capacity_check(pm, fig3_batch_step16, 70)
        assert report.resident_blocks + report.prefetch_buffer == 70
        assert report.feasible

    def test_empty_batch(self):
        pm = PlacementMatrix.all_resident([], 5)
        report = capacity_check(pm, [], 3)
        assert report.feasible and report.resident_blocks == 0


class TestBatchDecodeLatency:
    def test_all_resident_is_pure_compute(self, fig3_profile, fig3_batch_step1):
        pm = PlacementMatrix.all_resident([0, 1], 9)
        breakdown = batch_decode_latency(pm, fig3_batch_step1, fig3_profile)
        assert breakdown.total_stall_ms == 0.0
        assert breakdown.total_latency_ms == 9 * per_layer_compute(fig3_profile, 115)
        assert all(s == 0.0 for s in breakdown.per_layer_stall_ms)

    def test_uniform_offload_step1(self, fig3_profile, fig3_batch_step1):
        breakdown = batch_decode_latency(_placement_a(), fig3_batch_step1, fig3_profile)
        assert breakdown.stall_transfer_units == 9.0

    def test_uniform_offload_step16(self, fig3_profile, fig3_batch_step16):
        breakdown = batch_decode_latency(_placement_a(), fig3_batch_step16, fig3_profile)
        assert breakdown.stall_transfer_units == 12.0

    def test_total_is_compute_plus_stall(self, fig3_profile, fig3_batch_step16):
        b = batch_decode_latency(_placement_a(), fig3_batch_step16, fig3_profile)
        assert b.total_latency_ms == b.total_compute_ms + b.total_stall_ms
        assert b.total_stall_ms == pytest.approx(sum(b.per_layer_stall_ms))
        assert b.blocks_fetched == blocks_to_fetch(_placement_a(), fig3_batch_step16)


def _random_instance(rng):
    num_layers = rng.integers(1, 13)
    nreq = rng.integers(1, 4)
    batch = [make_request(i, blocks=int(rng.integers(1, 9))) for i in range(nreq)]
    rows = tuple(
        tuple(int(rng.integers(0, 2)) for _ in range(num_layers)) for _ in range(nreq)
    )
    pm = PlacementMatrix(tuple(range(nreq)), int(num_layers), rows)
    comp = float(rng.choice([0.5, 1.0, 1.5, 2.0, 3.0]))
    bw = float(rng.integers(1, 7))
    prof = SystemProfile(int(num_layers), comp, 0.0, bw, 10_000, 16)
    return pm, batch, prof


class TestOracleEquivalence:
    def test_exact_agreement_on_random_instances(self):
        import numpy as np

        rng = np.random.default_rng(2024)
        for _ in range(300):
            pm, batch, prof = _random_instance(rng)
            got = batch_decode_latency(pm, batch, prof)
            sizes = [r.blocks_per_layer for r in batch]
            stalls, total = quantum_latency(
                pm, sizes, prof.compute_base_ms, prof.bandwidth_blocks_per_ms,
                prof.num_layers,
            )
            # exact rational agreement, rendered as floats the same way the
            # production breakdown composes them
            assert got.per_layer_stall_ms == tuple(float(s) for s in stalls)
            assert got.total_stall_ms == float(sum(stalls, Fraction(0)))
            compute = Fraction(prof.compute_base_ms) * prof.num_layers
            assert got.total_latency_ms == float(compute) + float(total - compute)

    def test_float_twin_tracks_exact(self):
        import numpy as np

        rng = np.random.default_rng(7)
        for _ in range(200):
            pm, batch, prof = _random_instance(rng)
            exact = batch_decode_latency(pm, batch, prof)
            fast = batch_decode_latency_fast(pm, batch, prof)
            assert fast.total_latency_ms == pytest.approx(exact.total_latency_ms, rel=1e-9)
            assert fast.blocks_fetched == exact.blocks_fetched

    def test_delay_propagation_shifts_later_layers(self, fig3_profile, fig3_batch_step16):
        pm = _placement_a()
        sizes = [r.blocks_per_layer for r in fig3_batch_step16]
        stalls, starts, ends = __import__("oracles").quantum_timeline(
            pm, sizes, 1.0, 3.0, 9
        )
        comp = Fraction(1)
        for i in range(9):
            expected = sum(stalls[: i + 1], Fraction(0)) + comp * i
            assert starts[i] == expected


class TestMonotonicity:
    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_single_request_flip_to_resident_never_hurts(self, data):
        num_layers = data.draw(st.integers(1, 8))
        blocks = data.draw(st.integers(1, 6))
        row = data.draw(st.lists(st.integers(0, 1), min_size=num_layers, max_size=num_layers))
        if 0 not in row:
            return
        batch = [make_request(0, blocks=blocks)]
        prof = SystemProfile(num_layers, 1.0, 0.0, 2.0, 10_000, 16)
        base = PlacementMatrix((0,), num_layers, (tuple(row),))
        base_stall = batch_decode_latency(base, batch, prof).total_stall_ms
        flip_at = row.index(0)
        flipped_row = list(row)
        flipped_row[flip_at] = 1
        flipped = PlacementMatrix((0,), num_layers, (tuple(flipped_row),))
        flipped_stall = batch_decode_latency(flipped, batch, prof).total_stall_ms
        assert flipped_stall <= base_stall + 1e-12

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_fetch_and_buffer_shrink_on_flip(self, data):
        num_layers = data.draw(st.integers(1, 6))
        nreq = data.draw(st.integers(1, 3))
        batch = [
            make_request(i, blocks=data.draw(st.integers(1, 5))) for i in range(nreq)
        ]
        rows = [
            [data.draw(st.integers(0, 1)) for _ in range(num_layers)] for _ in range(nreq)
        ]
        zeros = [(i, l) for i in range(nreq) for l in range(num_layers) if rows[i][l] == 0]
        if not zeros:
            return
        pm = PlacementMatrix(tuple(range(nreq)), num_layers, tuple(tuple(r) for r in rows))
        i, l = zeros[0]
        rows[i][l] = 1
        pm2 = PlacementMatrix(tuple(range(nreq)), num_layers, tuple(tuple(r) for r in rows))
        assert blocks_to_fetch(pm2, batch) <= blocks_to_fetch(pm, batch)
        assert prefetch_buffer_requirement(pm2, batch) <= prefetch_buffer_requirement(pm, batch)


class TestReconfigurationDelta:
    def test_identity(self, fig3_batch_step16):
        pm = _placement_a()
        assert reconfiguration_delta(pm, pm, fig3_batch_step16) == (0, 0)

    def test_single_flip(self):
        batch = [make_request(0, blocks=4)]
        old = PlacementMatrix.from_strides([0], 9, [3])
        rows = list(old.rows[0])
        rows[2] = 1  # layer 3 back to GPU
        new = PlacementMatrix((0,), 9, (tuple(rows),))
        assert reconfiguration_delta(old, new, batch) == (4, 0)

    def test_fig3_transition_matches_entrywise_diff(self, fig3_batch_step16):
        old = _placement_a()
        new = PlacementMatrix.from_strides([0, 1], 9, [4, 3])
        h2g, g2h = reconfiguration_delta(old, new, fig3_batch_step16)
        # request 0 (4 blocks): {3,6,9} -> {4,8}: 3 layers return, 2 leave
        assert (h2g, g2h) == (12, 8)

    def test_misaligned_batches(self, fig3_batch_step16):
        old = _placement_a(ids=(0, 1))
        new = _placement_a(ids=(1, 0))
        with pytest.raises(DimensionMismatch):
            reconfiguration_delta(old, new, fig3_batch_step16)


class TestTransferTask:
    def test_remaining_bounds(self):
        TransferTask(request=1, dest_layer=3, size=6, remaining=6)
        with pytest.raises(ValueError):
            TransferTask(request=1, dest_layer=3, size=6, remaining=7)
