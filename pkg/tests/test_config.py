import pytest

from anystep import config as cfgmod
from anystep.config import AUTO, ConfigError
from anystep.transport import Kind


def test_defaults_validate_and_build():
    cfg = cfgmod.defaults()
    cfgmod.validate(cfg)
    ds = cfgmod.build_dataset(cfg).fit()
    net = cfgmod.build_network(cfg, ds)
    assert net.dim == 2 and net.seed == cfg["run"]["seed"]
    assert cfgmod.build_transport(cfg).kind is Kind.OT_FM
    tc = cfgmod.build_train(cfg)
    assert tc.guidance_warmup_iters == tc.iterations // 10
    assert tc.dde_eps == 0.005 and tc.frac_t_eq_r == 0.5 and tc.frac_r_eq_0 == 0.1


def test_round_trip_is_stable():
    cfg = cfgmod.defaults()
    cfgmod.set_value(cfg, "trainer.lr", "3e-4")
    cfgmod.set_value(cfg, "dataset.point", "0.25, -1.5")
    cfgmod.set_value(cfg, "transport.kind", "trigflow")
    text = cfgmod.dumps(cfg)
    back = cfgmod.parse(text)
    assert back == cfg
    assert cfgmod.dumps(back) == text


def test_partial_document_fills_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[trainer]\niterations = 50  # short\n[transport]\nt_max = auto\n")
    cfg = cfgmod.load(path)
    assert cfg["trainer"]["iterations"] == 50
    assert cfg["transport"]["t_max"] is AUTO
    assert cfg["network"] == cfgmod.DEFAULTS["network"]


@pytest.mark.parametrize("text,needle", [
    ("[trainer]\nlearning_rate = 1\n", "learning_rate"),
    ("[optimiser]\nlr = 1\n", "optimiser"),
    ("[trainer]\nlr = fast\n", "lr"),
    ("[trainer]\nguidance_enabled = maybe\n", "guidance_enabled"),
    ("[trainer]\nbatch_size = 0\n", "batch_size"),
    ("[run]\nworkers = 4\n", "workers"),
    ("[transport]\nkind = edm\n[trainer]\nweight_warp = tangent\n", "warp"),
    ("not an ini file", "unparseable"),
])
def test_bad_documents_name_the_problem(text, needle):
    with pytest.raises(ConfigError) as info:
        cfgmod.parse(text)
    assert needle in str(info.value)


def test_set_value_rejects_unknown_keys():
    cfg = cfgmod.defaults()
    with pytest.raises(ConfigError, match="bogus"):
        cfgmod.set_value(cfg, "trainer.bogus", "1")
    with pytest.raises(ConfigError):
        cfgmod.set_value(cfg, "nodot", "1")


def test_missing_file():
    with pytest.raises(ConfigError):
        cfgmod.load("/nonexistent/config.ini")


def test_sample_schedule_from_config():
    cfg = cfgmod.defaults()
    spec = cfgmod.build_transport(cfg)
    assert cfgmod.build_sample_schedule(cfg, spec).steps == 4
    assert cfgmod.build_sample_schedule(cfg, spec, steps=7).steps == 7
