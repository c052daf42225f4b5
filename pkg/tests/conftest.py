import numpy as np
import pytest

from xlst import tensor as T


@pytest.fixture(autouse=True)
def reset_default_dtype():
    # several suites flip the global precision; keep tests independent
    prev = T.get_default_dtype()
    yield
    T.set_default_dtype(prev)


@pytest.fixture(scope="session")
def micro_bundle(tmp_path_factory):
    """A small on-disk benchmark bundle shared by the CLI tests."""
    from xlst.synthdata import BenchmarkConfig, FamilyConfig, make_benchmark

    root = tmp_path_factory.mktemp("bundle")
    config = BenchmarkConfig(
        family=FamilyConfig(utt_frames_min=20, utt_frames_max=36),
        seed=99,
        hires_train=16, hires_dev=6, unlabeled_per_language=10,
        finetune_per_language=6, test_per_language=6)
    make_benchmark(config, str(root))
    return str(root)


MICRO_INI = """
[run]
seed = 5
precision = 32

[data]
corpus = {corpus}

[encoder]
input_dim = 16
cnn_channels = 4
transformer_blocks = 1
attention_dim = 16
attention_heads = 2
ffn_dim = 24
projector_hidden_dim = 16
projector_output_dim = 8
dropout = 0.0

[augment]
time_mask_len = 4
time_mask_proportion = 0.3
freq_num_windows = 1
freq_max_width = 4

[schedule]
epochs = 2
peak_lr = 1e-3
warmup = 0.2
hold = 0.0
decay = 0.8

[train]
batch_size = 4
checkpoint_interval = 2
monitor_interval = 3
monitor_utterances = 6
"""


@pytest.fixture()
def micro_ini(micro_bundle, tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(MICRO_INI.format(corpus=micro_bundle))
    return str(path)
