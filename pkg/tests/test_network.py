import hashlib
import subprocess
import sys

import numpy as np
import pytest

from gccunet.nn import Conv2d
from gccunet.network import (
    VARIANTS,
    ModelConfig,
    build_model,
    graph_capsule_parameters,
    load_model,
    load_weights,
    param_breakdown,
    param_count,
    save_weights,
)
from gccunet.tensor import ConfigurationError, ShapeError, backward
from gccunet.training import cross_entropy

# registry totals at the default configuration, frozen after enumeration
DEFAULT_COUNTS = {"local_only": 587543, "global_vanilla": 560247, "global_gc": 561033, "fusion": 631045}


def small(**kw):
    base = dict(depth=3, base_channels=4, capsules=2, atoms=2, spatial_k=3)
    base.update(kw)
    return ModelConfig(**base)


def test_single_conv_count():
    assert param_count(Conv2d(2, 3, 1, np.random.default_rng(0))) == 9


def test_plain_unet_has_no_graph_parameters():
    m = build_model(small(variant="local_only", use_bga=False, use_msgf=False))
    assert graph_capsule_parameters(m) == []
    assert not any("gc" in n or "capsule" in n for n, _ in m.named_parameters())


def test_fusion_default_forward_shape():
    m = build_model(ModelConfig())
    out = m(np.random.default_rng(0).random((1, 1, 32, 32)))
    assert out.shape == (1, 2, 32, 32)
    assert np.all(np.isfinite(out.data))


def test_default_counts_frozen_and_ordered():
    counts = {v: param_count(build_model(ModelConfig(variant=v))) for v in VARIANTS}
    assert counts == DEFAULT_COUNTS
    assert counts["local_only"] < counts["fusion"]
    m = build_model(ModelConfig())
    assert sum(param_breakdown(m).values()) == counts["fusion"]
    assert sum(a.size for a in m.state_dict().values()) == counts["fusion"]


def test_parameter_names_unique():
    names = [n for n, _ in build_model(small()).named_parameters()]
    assert len(names) == len(set(names))


def test_serial_and_parallel_share_inventory():
    serial = build_model(small(fusion_mode="serial"))
    parallel = build_model(small(fusion_mode="parallel"))
    assert [(n, p.shape) for n, p in serial.named_parameters()] == \
        [(n, p.shape) for n, p in parallel.named_parameters()]
    x = np.random.default_rng(1).random((1, 1, 16, 16))
    assert not np.array_equal(serial(x).data, parallel(x).data)


def test_msgf_modes_differ_by_two_graph_layers():
    shared = build_model(small(msgf_mode="shared"))
    individual = build_model(small(msgf_mode="individual"))
    c = 4
    assert param_count(individual) - param_count(shared) == 2 * (1 + c * c)


def test_zero_image_and_batch_independence():
    m = build_model(small())
    assert np.all(np.isfinite(m(np.zeros((1, 1, 16, 16))).data))
    img = np.random.default_rng(2).random((1, 1, 16, 16))
    out = m(np.concatenate([img, img])).data
    assert np.array_equal(out[0], out[1])


def test_indivisible_extent_has_padding_hint():
    m = build_model(small())
    with pytest.raises(ShapeError, match="pad by 6 rows and 0 columns"):
        m(np.zeros((1, 1, 18, 16)))
    with pytest.raises(ShapeError):
        m(np.zeros((1, 3, 16, 16)))


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        ModelConfig(variant="hybrid").validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(depth=2, use_msgf=True).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"depth": 3, "colour": "red"})


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_trains_one_step(variant):
    m = build_model(small(variant=variant))
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 16, 16))
    y = (rng.random((2, 16, 16)) < 0.3).astype(np.uint8)
    loss = cross_entropy(m(x), y, np.ones_like(y))
    backward(loss, m.parameters())
    assert np.isfinite(loss.data)
    assert all(np.all(np.isfinite(p.grad)) for p in m.parameters())
    assert any(np.any(p.grad != 0) for p in m.parameters())


def test_config_round_trip(tmp_path):
    cfg = small(variant="global_gc", msgf_mode="concat", seed=7)
    cfg.save(tmp_path / "cfg.json")
    assert ModelConfig.load(tmp_path / "cfg.json") == cfg
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    m = build_model(small(seed=4))
    x = np.random.default_rng(5).random((1, 1, 16, 16))
    path = tmp_path / "w.gccw"
    save_weights(m, path)
    assert np.array_equal(load_model(path)(x).data, m(x).data)
    other = build_model(small(seed=4))
    for q in other.parameters():
        q.data += 0.1
    assert not np.array_equal(other(x).data, m(x).data)
    assert np.array_equal(load_weights(other, path)(x).data, m(x).data)
    with pytest.raises(ConfigurationError):
        load_weights(build_model(small(seed=4, variant="global_gc")), path)
    # the seed also fixes spatial-graph subsampling, so it must match too
    with pytest.raises(ConfigurationError):
        load_weights(build_model(small(seed=9)), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ConfigurationError):
        load_model(path)


SCRIPT = """
import hashlib, numpy as np
from gccunet.network import ModelConfig, build_model
m = build_model(ModelConfig(base_channels=4, capsules=2, atoms=2, seed=11))
x = np.random.default_rng(12).random((1, 1, 16, 16))
print(hashlib.sha256(m(x).data.tobytes()).hexdigest())
"""


def test_logits_bit_identical_across_processes():
    digests = [subprocess.run([sys.executable, "-c", SCRIPT], capture_output=True, text=True,
                              check=True).stdout.strip() for _ in range(2)]
    m = build_model(ModelConfig(base_channels=4, capsules=2, atoms=2, seed=11))
    x = np.random.default_rng(12).random((1, 1, 16, 16))
    assert digests[0] == digests[1] == hashlib.sha256(m(x).data.tobytes()).hexdigest()
