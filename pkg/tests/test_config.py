import json
from pathlib import Path

import pytest

from tforge import attacks, inversion, nc
from tforge.config import RunConfig, load_defaults_ledger, write_manifest
from tforge.errors import ConfigError


def test_code_defaults_match_ledger():
    led = load_defaults_ledger()
    b = inversion.ConstraintBudget()
    assert (b.alpha, b.beta_fraction, b.gamma, b.delta, b.inter_mask_fraction) == (
        led["alpha"], led["beta_fraction"], led["gamma"], led["delta"], led["inter_mask_fraction"])
    assert list(inversion.W_LARGE) == led["w_large"] and list(inversion.W_SMALL) == led["w_small"]
    assert list(inversion.OptConfig().w_large) == led["w_large"]
    assert inversion.DETECTION_THRESHOLD == led["detection_threshold"]
    cfg = RunConfig()
    assert (cfg.alpha, cfg.beta_fraction, cfg.gamma, cfg.delta, cfg.inter_mask_fraction) == (
        led["alpha"], led["beta_fraction"], led["gamma"], led["delta"], led["inter_mask_fraction"])
    assert cfg.w_large == led["w_large"] and cfg.per_class == led["per_class"]
    assert cfg.detection_threshold == led["detection_threshold"]
    patch = attacks.make_spec("patch", 0)
    assert patch.params["size"] == led["patch_size"] and patch.params["color"] == led["patch_color"]
    assert patch.params["position"] == led["patch_position"] and patch.poison_rate == led["poison_rate"]
    sig = attacks.make_spec("sig", 0)
    assert (sig.params["frequency"], sig.params["magnitude"]) == (led["sig_frequency"], led["sig_magnitude"])
    w = attacks.make_spec("wanet", 0)
    assert (w.params["strength"], w.params["grid_size"]) == (led["wanet_strength"], led["wanet_grid_size"])
    assert attacks.make_spec("bpp", 0).params["depth"] == led["bpp_depth"]


def test_nc_defaults():
    c = nc.NCConfig()
    assert (c.lr, c.init_cost, c.success, c.patience) == (0.1, 1e-3, 0.99, 5)


@pytest.mark.parametrize("key, value", [("beta_fraction", 0.0), ("beta_fraction", 1.5),
                                        ("inter_mask_fraction", -0.1), ("inter_mask_fraction", 2.0)])
def test_budget_fraction_out_of_range(key, value):
    with pytest.raises(ConfigError):
        RunConfig(**{key: value})


def test_unknown_key_and_version(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(version=99)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.yaml")


def test_profiles_fill_unset_fields():
    syn, cif = RunConfig(dataset="synthetic"), RunConfig(dataset="cifar10")
    assert cif.steps == 2000 and cif.unet_width == 16 and cif.patience == 200
    assert syn.steps < cif.steps
    assert RunConfig(dataset="cifar10", steps=7).steps == 7


def test_yaml_and_json_load(tmp_path):
    (tmp_path / "a.yaml").write_text("attack: patch\ntarget_label: 2\nalpha: 0.02\n")
    (tmp_path / "a.json").write_text(json.dumps({"attack": "patch", "target_label": 2, "alpha": 0.02}))
    a, b = RunConfig.load(tmp_path / "a.yaml"), RunConfig.load(tmp_path / "a.json")
    assert a == b and a.budget().alpha == 0.02 and a.digest() == b.digest()


def test_roundtrip_and_digest_sensitivity():
    cfg = RunConfig(attack="wanet", seed=3)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert RunConfig(seed=4).digest() != RunConfig(seed=3).digest()


def test_manifest_contents(tmp_path):
    cfg = RunConfig(seed=11)
    path = write_manifest(tmp_path, "train", cfg, extra_key=1)
    doc = json.loads(path.read_text())
    assert doc["config_digest"] == cfg.digest() and doc["seed"] == 11 and doc["code_version"]
    assert doc["kernel_backend"] in ("cython", "python") and doc["extra_key"] == 1
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 11


def test_desk_recipe_applied_and_overridable():
    cfg = RunConfig.desk("wanet")
    assert cfg.grain == 0.05 and cfg.lr == 0.01 and cfg.attack_params == {}
    assert cfg.dataset_kwargs()["grain"] == 0.05
    assert RunConfig.desk("wanet", grain=0.0).grain == 0.0
    assert RunConfig.desk("patch").attack_params == {}


@pytest.mark.parametrize("name", ["desk_wanet", "desk_bpp"])
def test_shipped_desk_configs_match_recipes(name):
    root = Path(__file__).resolve().parents[1]
    cfg = RunConfig.load(root / "configs" / f"{name}.yaml")
    assert cfg == RunConfig.desk(cfg.attack)
