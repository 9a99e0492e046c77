import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpkit import codec
from rpkit.codec import Color, Keyword, Px, Weight

from conftest import random_rp_page, random_vector


def test_category_ranges_tile_the_vocabulary():
    spans = sorted(codec.CATEGORY_RANGES.values())
    assert spans[0][0] == 0 and spans[-1][1] == codec.VOCAB_SIZE - 1
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert b0 == a1 + 1
    assert sum(b - a + 1 for a, b in spans) == 1993


@pytest.mark.parametrize("param, value, token", [
    ("left", 1052, 1052),
    ("left", 0, 0),
    ("font-weight", 400, 1973),
    ("line-height", Keyword("normal"), 1979),
    ("text-decoration", "none", 1986),
    ("color", Color(0), 1921),
    ("background-color", Color(45), 1966),
])
def test_encode_examples(param, value, token):
    assert codec.encode_value(param, value) == token


def test_font_weight_range_is_ordinal():
    got = [codec.encode_value("font-weight", w) for w in codec.FONT_WEIGHTS]
    assert got == list(range(1970, 1979))


@pytest.mark.parametrize("param, token, value", [
    ("font-weight", 1970, Weight(100)),
    ("line-height", 1979, Keyword("normal")),
    ("text-decoration", 1986, Keyword("none")),
    ("width", 1920, Px(1920)),
])
def test_decode_examples(param, token, value):
    assert codec.decode_value(param, token) == value


@pytest.mark.parametrize("param, value, exc", [
    ("left", 1921, codec.OutOfRange),
    ("left", -1, codec.OutOfRange),
    ("font-size", 33, codec.OutOfRange),
    ("color", 12, codec.WrongKind),
    ("font-weight", 450, codec.OutOfRange),
    ("left", codec.PAD_VALUE, codec.WrongKind),
    ("text-align", "middle", codec.OutOfRange),
    ("flex", 3, codec.UnknownParameter),
    ("top", True, codec.WrongKind),
])
def test_encode_errors(param, value, exc):
    with pytest.raises(exc):
        codec.encode_value(param, value)


def test_decode_rejects_illegal_tokens():
    with pytest.raises(codec.IllegalToken):
        codec.decode_value("width", 1930)
    with pytest.raises(codec.IllegalToken):
        codec.decode_value("left", codec.PAD)
    with pytest.raises(codec.IllegalToken):
        codec.decode_value("color", 1993)


def test_exhaustive_token_round_trip():
    vocab = codec.DEFAULT_VOCAB
    covered = set()
    for p in codec.RP_NAMES:
        for t in range(codec.VOCAB_SIZE):
            legal = vocab.legal_mask[codec.RP_INDEX[p], t]
            if legal:
                assert codec.encode_value(p, codec.decode_value(p, t)) == t
                covered.add(t)
            else:
                with pytest.raises(codec.IllegalToken):
                    codec.decode_value(p, t)
    assert covered == set(range(codec.VOCAB_SIZE))


def test_pad_policy_controls_violations():
    strict = codec.Vocabulary(pad_params=frozenset())
    pad = np.full(codec.W, codec.PAD)
    assert len(codec.validate_vector(pad, strict)) == 13
    # default policy: PAD is legal on the nine style slots only
    assert len(codec.validate_vector(pad)) == 4


def test_validate_names_the_bad_slot(rng):
    v = random_vector(rng)
    assert codec.validate_vector(v) == []
    v[codec.RP_INDEX["width"]] = 1930
    bad = codec.validate_vector(v)
    assert len(bad) == 1 and bad[0].param == "width"
    assert codec.validate_vector(np.zeros(5))[0].param == "*"


def test_vocabulary_checks_palette():
    with pytest.raises(ValueError):
        codec.Vocabulary(palette=((0, 0, 0, 1),) * 46)
    with pytest.raises(codec.UnknownParameter):
        codec.Vocabulary(pad_params=frozenset({"margin"}))


def test_css_contains_selector_and_pixels():
    v = codec.vector_from_values({
        "left": 0, "top": 0, "width": 10, "height": 20, "font-style": "normal", "font-weight": 400,
        "font-size": 16, "line-height": Keyword("normal"), "text-align": "left",
        "text-decoration": "none", "text-transform": "none", "color": Color(3),
        "background-color": Color(0)})
    css = codec.emit_css({1: v})
    assert ".ele1" in css and "left: 0px" in css
    r, g, b, _ = codec.DEFAULT_VOCAB.rgba(3)
    assert f"color: rgba({r}, {g}, {b}" in css or f"color: rgba({r},{g},{b}" in css


def test_palette_contains_reference_colour():
    assert (153, 204, 0, 1) in [tuple(c) for c in codec.DEFAULT_VOCAB.palette]


def test_empty_page_json():
    assert json.loads(codec.to_json({})) == {}


def test_json_keys_are_element_ids(rng):
    page = random_rp_page(rng, 5)
    assert sorted(json.loads(codec.to_json(page))) == [f"ele{i}" for i in range(1, 6)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_json_and_css_round_trip(seed):
    rng = np.random.default_rng(seed)
    page = random_rp_page(rng)
    back = codec.from_json(codec.to_json(page))
    assert sorted(back) == sorted(page)
    for k in page:
        np.testing.assert_array_equal(back[k], page[k])
    back = codec.parse_css_rules(codec.emit_css(page))
    for k in page:
        np.testing.assert_array_equal(back[k], page[k])


@pytest.mark.parametrize("text", [
    "[1, 2]",
    '{"div": {}}',
    '{"ele1": {"left": "10px"}}',
    '{"ele1": 5}',
    "not json",
])
def test_from_json_rejects_malformed(text):
    with pytest.raises(codec.CodecError):
        codec.from_json(text)


def test_parse_error_carries_path(rng):
    obj = json.loads(codec.to_json(random_rp_page(rng, 2)))
    obj["ele2"]["width"] = "wide"
    with pytest.raises(codec.CodecError) as ei:
        codec.from_json(json.dumps(obj))
    assert "ele2" in str(ei.value)


def test_nearest_color_snaps_to_palette():
    rgba = codec.DEFAULT_VOCAB.rgba(7)
    assert codec.nearest_color(rgba) == 7
