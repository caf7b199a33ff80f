import pytest

from weakcrack.config import Config, validate_config
from weakcrack.synthetic import generate_corpus


def tiny_cfg(root, **overrides) -> Config:
    """Small/fast settings shared by the training-path tests."""
    cfg = Config()
    cfg.data.root = str(root)
    cfg.data.input_size = 32
    cfg.data.batch_size = 2
    cfg.model.backbone = "tiny_test"
    cfg.model.width = 4
    cfg.train.max_steps = 4
    cfg.train.warmup_steps = 0
    cfg.train.log_every = 1
    cfg.crf.iterations = 2
    cfg.crf.spatial_sigma = 2.0
    cfg.crf.bilateral_sigma_xy = 5.0
    cfg.crf.trunc_eps = 1e-3
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        setattr(getattr(cfg, section), key, value)
    return validate_config(cfg)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, n_train=12, n_test=6, size=32, seed=11)
    return root
