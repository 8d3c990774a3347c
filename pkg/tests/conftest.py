import numpy as np
import pytest

from stgan.data import save_idx, synthetic_digits


@pytest.fixture(scope="session")
def digits_data_dir(tmp_path_factory):
    """A tiny IDX-format digit corpus laid out like the standard files."""
    root = tmp_path_factory.mktemp("digits_idx")
    train = synthetic_digits(30, seed=100)
    test = synthetic_digits(8, seed=101)
    save_idx(train, root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    save_idx(test, root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    return root


TINY_RUN_YAML = """
data:
  path: "{data}"
  pad_to_32: false
  test_limit: 40
split:
  unlabelled_limit: 48
gan:
  epochs: 1
  batch_size: 16
  latent_dim: 8
selftrain:
  rounds: 1
  n_subsets: 2
  sample_frac: 0.5
  gen_per_round: 4
experiment:
  schemes: [vanilla, basic, rejection]
  counts_per_class: [2]
  seeds: [0]
  out_dir: "{out}"
"""


def tiny_run_config_text(data_dir, out_dir):
    return TINY_RUN_YAML.format(data=data_dir, out=out_dir)
