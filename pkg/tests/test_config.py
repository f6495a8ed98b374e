import pytest

from aga import config
from aga.corpus import CorpusConfig
from aga.trainer import TrainConfig


def test_parse_comments_and_blanks():
    raw = config.parse_text("# header\n\nn_train = 40  # inline\nepochs=3\n")
    assert raw == {"n_train": "40", "epochs": "3"}


def test_shared_file_applies_to_each_section():
    raw = config.parse_text("n_train=40\nepochs=3\ntrain.lr=0.01\ncorpus.noise_std=0.0\n")
    c = config.apply(CorpusConfig(), raw, "corpus")
    t = config.apply(TrainConfig(), raw, "train")
    assert (c.n_train, c.noise_std) == (40, 0.0)
    assert (t.epochs, t.lr) == (3, 0.01)


@pytest.mark.parametrize("text, field", [
    ("bogus = 1", "bogus"),
    ("n_train = many", "n_train"),
    ("model.d = 4", "model.d"),
    ("noise_std = -1", "noise_std"),
])
def test_errors_name_the_field(text, field):
    with pytest.raises(config.ConfigError, match=field):
        config.apply(CorpusConfig(), config.parse_text(text), "corpus")


def test_malformed_lines():
    with pytest.raises(config.ConfigError, match=":2"):
        config.parse_text("a=1\njust words\n")
    with pytest.raises(config.ConfigError, match="twice"):
        config.parse_text("a=1\na=2\n")


def test_read_file_hash(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("epochs = 2\n")
    raw, sha = config.read_file(p)
    assert raw == {"epochs": "2"} and len(sha) == 64
    p.write_bytes(b"\xff\xfe")
    with pytest.raises(config.ConfigError, match="UTF-8"):
        config.read_file(p)
