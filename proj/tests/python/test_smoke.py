import pathlib

import pytest

import mpq

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "fixtures"


@pytest.fixture(scope="module")
def toy():
    return mpq.Graph.load(FIXTURES / "toycnn_mnist.json")


def test_graph_loads(toy):
    assert toy.order[0] == toy.input_id
    assert [toy.layer_kind(i) for i in toy.weighted_layers()][0] == "conv2d"
    assert toy.total_params() == sum(toy.param_count(i) for i in toy.weighted_layers())


def test_footprint_matches_formula(toy):
    p8 = mpq.Policy.uniform(toy, 8, 8)
    bare = mpq.footprint(toy, p8, include_overheads=False)
    assert bare["rom_total"] == toy.total_params()
    full = mpq.footprint(toy, p8)
    assert full["rom_total"] == sum(full["rom_per_layer"].values())
    assert full["ram_peak"] == max(full["per_step_ram"])
    p2 = mpq.Policy.uniform(toy, 2, 2)
    assert mpq.footprint(toy, p2)["rom_total"] < full["rom_total"]


def test_enforcement(toy):
    p8 = mpq.Policy.uniform(toy, 8, 8)
    rom = mpq.footprint(toy, p8)["rom_total"]
    fitted = mpq.enforce_rom(toy, p8, rom * 6 // 10)
    assert mpq.footprint(toy, fitted)["rom_total"] <= rom * 6 // 10
    assert all(fitted.weight_bits[i] <= 8 for i in toy.weighted_layers())
    with pytest.raises(mpq.InfeasibleError):
        mpq.enforce_rom(toy, p8, 10)
    with pytest.raises(mpq.Error):
        mpq.enforce_ram(toy, p8, 1)


def test_policy_json_round_trip(toy):
    p = mpq.Policy.uniform(toy, 4, 8)
    p.weight_bits[toy.weighted_layers()[0]] = 2
    assert mpq.Policy.from_json(p.to_json()) == p
    p.validate(toy)


def test_packing_round_trip():
    for bits in (2, 4):
        for signed in (False, True):
            lo = -(1 << (bits - 1)) if signed else 0
            values = list(range(lo, lo + (1 << bits))) * 3
            data = mpq.pack(values, bits, signed)
            assert len(data) == (len(values) * bits + 7) // 8
            assert mpq.unpack(data, bits, len(values), signed) == values


def test_action_mapping():
    assert [mpq.bits_from_action(a) for a in (0.0, 0.5, 0.99)] == [2, 4, 8]
    assert all(mpq.bits_from_action(mpq.action_center(b)) == b for b in (2, 4, 8))


def test_bad_graph_is_an_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ nope")
    with pytest.raises(mpq.ParseError):
        mpq.Graph.load(bad)
