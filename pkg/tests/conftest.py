import numpy as np
import pytest

from duotalk.corpus import TaskSpec, build_vocabulary


@pytest.fixture(scope="session")
def tiny_vocab():
    """8 text ids, 10 audio ids: soa=18 eoa=19 eos=20 mask=21 pad=22."""
    return build_vocabulary(8, 10)


@pytest.fixture(scope="session")
def task_vocab():
    """The end-to-end task vocabulary: 32 text, 64 audio."""
    return build_vocabulary(32, 64)


@pytest.fixture(scope="session")
def task_spec():
    return TaskSpec(r=4, n_t=4, b_span=16, direction="tts", min_text_len=2, max_text_len=12)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
