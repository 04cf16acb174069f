import numpy as np
import pytest
import torch

from bsast.config import ModelConfig, tiny_model
from bsast.errors import FormatError
from bsast.model import BSAST, load_checkpoint, parameter_count, save_checkpoint


def test_forward_shapes(rng):
    model = BSAST(tiny_model()).double()
    mix = torch.as_tensor(rng.standard_normal((3, 4, 777)))
    out = model(mix, torch.zeros(3, 16, dtype=torch.float64))
    assert out.shape == (3, 777)


def test_init_merge_is_channel_mean():
    w = BSAST(tiny_model()).merge.net.weight.detach().numpy()
    assert np.allclose(w[0], [0.25, 0, 0.25, 0, 0.25, 0, 0.25, 0])
    assert np.allclose(w[1], [0, 0.25, 0, 0.25, 0, 0.25, 0, 0.25])


def test_same_seed_same_init():
    a, b = BSAST(tiny_model(), seed=3), BSAST(tiny_model(), seed=3)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    c = BSAST(tiny_model(), seed=4)
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_single_channel_model(rng):
    model = BSAST(tiny_model(channels=1, rope_channel_axis=False)).double()
    out = model(torch.as_tensor(rng.standard_normal((1, 1, 500))), torch.zeros(1, 16, dtype=torch.float64))
    assert out.shape == (1, 500)


def test_checkpoint_round_trip(tmp_path):
    model = BSAST(tiny_model(), seed=2).randomize(5)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    for (name, p), q in zip(model.state_dict().items(), back.state_dict().values()):
        assert torch.equal(p, q), name


def test_checkpoint_is_deterministic(tmp_path):
    save_checkpoint(BSAST(tiny_model(), seed=1), tmp_path / "a.ckpt")
    save_checkpoint(BSAST(tiny_model(), seed=1), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(BSAST(tiny_model()), path)
    raw = path.read_bytes()
    cases = {"magic": b"NOPE" + raw[4:], "truncated": raw[:-10], "trailing": raw + b"\0"}
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


def test_parameter_count_matches_layout():
    cfg = tiny_model()
    D, d = cfg.hidden, cfg.query_dim
    h = cfg.film_width
    enc = sum(2 * w + 2 * w * D + D for w in cfg.band_scheme.widths)
    film = (cfg.blocks + 1) * (d * h + h + h * 2 * D + 2 * D)
    width = cfg.heads * cfg.head_dim
    attn = 3 * (D + 3 * (D * width + width) + width * D + D)
    ff = D + D * 4 * D + 4 * D + 4 * D * D + D
    dec = sum(D * 4 * D + 4 * D + 4 * D * 4 * w + 4 * w for w in cfg.band_scheme.widths)
    merge = 2 * cfg.channels * 2 + 2
    assert parameter_count(BSAST(cfg)) == enc + film + cfg.blocks * (attn + ff) + dec + merge


def test_shared_film():
    cfg = tiny_model(blocks=2, share_film=True)
    assert len(BSAST(cfg).backbone.films) == 1
    assert len(BSAST(tiny_model(blocks=2)).backbone.films) == 3


def test_full_size_config_builds():
    cfg = ModelConfig()
    assert len(cfg.band_scheme) == 25 and cfg.film_width == 256
