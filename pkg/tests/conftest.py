import pytest

from kvsim.core import RequestState, SloConfig, SystemProfile


def make_request(rid, blocks=None, prompt=None, generated=0, output=400, block_size=16,
                 arrival=0.0):
    """Request with a given block count (prompt placed mid-block) or prompt."""
    if prompt is None:
        assert blocks is not None
        prompt = blocks * block_size - block_size // 2  # mid-block, stable under +1
    req = RequestState(
        id=rid,
        arrival_time_ms=arrival,
        prompt_tokens=prompt,
        target_output_tokens=output,
        block_size=block_size,
    )
    req.generated_tokens = generated
    req.sync_blocks()
    return req


@pytest.fixture
def fig3_profile():
    """9 layers, 70-block budget, 3 blocks transferable per 1 ms layer time."""
    return SystemProfile(
        num_layers=9,
        compute_base_ms=1.0,
        compute_per_token_ms=0.0,
        bandwidth_blocks_per_ms=3.0,
        gpu_block_budget=70,
        block_size=16,
    )


@pytest.fixture
def fig3_batch_step1():
    # prompts 34 and 81 give 3 and 6 blocks; request 0 crosses to 4 blocks
    # exactly at decode step 16.
    return [
        make_request(0, prompt=34, output=400),
        make_request(1, prompt=81, output=400),
    ]


@pytest.fixture
def fig3_batch_step16():
    return [
        make_request(0, prompt=34, generated=15, output=400),
        make_request(1, prompt=81, generated=15, output=400),
    ]


@pytest.fixture
def loose_slo():
    return SloConfig(tbt_target_ms=1e6, tpot_target_ms=1e6, window_min=1, window_max=1)
