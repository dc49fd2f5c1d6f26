import pytest

from parcap.config import ConfigError, build_set, emit_config, parse_config
from parcap.ptgrid import GridSpec

FULL = """
output_dir = "runs"
threads = 2
seed = 7

[grid]
n = 1
p = "7/3"
h = 0.03125
tau = 0.0078125
T = 0.5
extents = [1.0]

[solver]
newton_tol = 1e-9
max_iter = 40

[sets.a]
kind = "cylinder"
center = [0.5]
t = 0.25
radius = 0.1

[sets.u]
kind = "union"
parts = [{kind = "box", lo = [0.2], hi = [0.3], t0 = 0.1, t1 = 0.2}, {kind = "disc", center = [0.6], radius = 0.1, t = 0.3}]

[sets.dust]
kind = "dyadic-fractal"
origin = [0.25]
t0 = 0.125
r0 = 0.5
depth = 2
keep = 3

[experiment]
ids = ["cylinder_scaling"]

[experiment.params.cylinder_scaling]
r_list = [0.1, 0.2]
"""


def test_defaults_from_empty_text():
    cfg = parse_config("")
    g = cfg.grid_spec()
    assert isinstance(g, GridSpec) and g.n == 1 and float(g.p) == 3.0


def test_round_trip():
    cfg = parse_config(FULL)
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert cfg.grid_spec().p == GridSpec(1, (1.0,), 1 / 32, 1 / 128, 0.5, "7/3").p


@pytest.mark.parametrize(
    "p,msg",
    [("2", "p must exceed 2"), (2, "p must exceed 2"), ("1.5", "p must exceed 2"), (3.14159, "p must be rational k/l"), ("abc", "p must be rational k/l"), ("11/2", "k <= 9")],
)
def test_p_validation(p, msg):
    text = f"[grid]\np = {p!r}\n" if isinstance(p, str) else f"[grid]\np = {p}\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text.replace("'", '"'))
    assert any(msg in e for e in info.value.errors)


def test_all_errors_are_collected():
    text = """
bogus = 1
[grid]
p = "2"
h = -1
[solver]
damping = 2.0
[sets.x]
kind = "cylinder"
center = [0.5]
[problem]
initial = "cosine"
"""
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    errs = " | ".join(info.value.errors)
    for frag in ("unknown key 'bogus'", "p must exceed 2", "grid.h", "damping", "missing 'radius'", "problem.initial"):
        assert frag in errs
    assert len(info.value.errors) >= 6


def test_unknown_experiment_and_syntax_error():
    with pytest.raises(ConfigError, match="unknown experiment"):
        parse_config('[experiment]\nids = ["nope"]\n')
    with pytest.raises(ConfigError, match="TOML syntax"):
        parse_config("[grid\n")


def test_build_sets():
    cfg = parse_config(FULL)
    g = cfg.grid_spec()
    for name in ("a", "u"):
        S = build_set(cfg.sets[name], g)
        assert len(S) > 0 and S.shape == g.shape
    # dust rectangles are far thinner than tau at p = 7/3; a p = 3 grid with fine tau resolves them
    fine = parse_config('[grid]\np = "3"\nh = 0.0078125\ntau = 0.0009765625\nT = 0.5\n').grid_spec()
    assert len(build_set(cfg.sets["dust"], fine)) > 0
    assert cfg.grid_spec(refine=1).cells == (64,)
