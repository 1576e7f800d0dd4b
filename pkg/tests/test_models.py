from pathlib import Path

import pytest

from regen_mfg.exceptions import ConfigError
from regen_mfg.models import RunConfig, TrainerConfig, load_config, parse_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "regen_mfg" / "config"


@pytest.mark.parametrize("name", ["lq1_desk.cfg", "sr_desk.cfg", "target_tracking_desk.cfg",
                                  "barrier_desk.cfg", "lq1_d50_smoke.cfg"])
def test_shipped_profiles_load(name):
    config = load_config(CONFIG_DIR / name)
    assert config.trainer.inner_steps == 2 and config.trainer.adversarial_steps == 1
    assert config.network.width == 104 and config.network.test_width == 1200


def test_desk_profile_values():
    config = load_config(CONFIG_DIR / "lq1_desk.cfg")
    assert config.variant == "lq1" and config.d == 1
    assert config.trainer.ensemble_size == 50_000
    assert config.trainer.batch_size == 2_500
    assert config.trainer.iterations == 3_000


@pytest.mark.parametrize("name", ["target_tracking_desk.cfg", "barrier_desk.cfg"])
def test_interaction_profiles_bound_control_and_snapshot(name):
    config = load_config(CONFIG_DIR / name)
    assert (config.network.control_lower, config.network.control_upper) == (-8.0, 8.0)
    assert config.trainer.snapshot_every == 1000
    assert config.metrics.paths == 1024


def test_seed_override():
    assert load_config(CONFIG_DIR / "lq1_desk.cfg", seed=17).seed == 17


def test_missing_variant_names_field_and_line():
    text = "[run]\nseed = 1\n\n[problem]\nd = 2\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == "variant"
    assert err.value.line == 4
    assert "variant" in str(err.value) and str(err.value).startswith("line 4:")


def test_invalid_value_names_line():
    text = "[problem]\nvariant = lq1\n\n[trainer]\nensemble_size = 100\nbatch_size = -3\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == "trainer.batch_size"
    assert err.value.line == 6


def test_unknown_variant_and_section():
    with pytest.raises(ConfigError):
        parse_config("[problem]\nvariant = heat\n")
    with pytest.raises(ConfigError):
        parse_config("[problem]\nvariant = lq1\n[extras]\nfoo = 1\n")


def test_batches_must_fit():
    with pytest.raises(ConfigError):
        parse_config("[problem]\nvariant = lq1\n[trainer]\nensemble_size = 100\nbatch_size = 60\n")


def test_round_trip_through_ini():
    text = ("[run]\nseed = 4\n[problem]\nvariant = lq2\nd = 3\nconstants.c0 = 0.5\n"
            "[trainer]\niterations = 10\nfresh_noise = true\n[network]\ncontrol_lower = -1.5\n")
    config = parse_config(text)
    assert config.constants == {"c0": 0.5}
    assert config.trainer.fresh_noise is True
    again = parse_config(config.to_ini())
    assert again == config


def test_learning_rate_schedule():
    trainer = TrainerConfig(iterations=100, ensemble_size=100, batch_size=10)
    value, control, test = trainer.learning_rates(0, 1)
    assert value == pytest.approx(3e-3) and control == pytest.approx(3e-3) and test == pytest.approx(3e-2)
    value, _, test = trainer.learning_rates(100, 4)
    assert value == pytest.approx(1.5e-5) and test == pytest.approx(1.5e-4)
    override = TrainerConfig(iterations=100, ensemble_size=100, batch_size=10, lr_base=1.0)
    assert override.learning_rates(0, 9)[0] == pytest.approx(1e-3)


def test_full_scale_profile():
    config = RunConfig.full_scale("lq1", 1)
    assert config.trainer.ensemble_size == 1_024_000
    assert config.trainer.iterations == 9_000
    assert config.trainer.batch_size == 51_200


if __name__ == "__main__":
    pytest.main(["-v"])
