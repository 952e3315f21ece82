from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffnet.stemmer import porter_stem

REFERENCE = [
    tuple(line.split("\t"))
    for line in (Path(__file__).parent / "data" / "porter_reference.tsv").read_text().splitlines()
    if line and not line.startswith("#")
]


def test_reference_list_is_large_enough():
    assert len(REFERENCE) >= 50
    assert ("relational", "relat") in REFERENCE


@pytest.mark.parametrize("word,stem", REFERENCE)
def test_reference_vectors(word, stem):
    assert porter_stem(word) == stem


@pytest.mark.parametrize("word,stem", [("caresses", "caress"), ("ponies", "poni"), ("sky", "sky")])
def test_named_examples(word, stem):
    assert porter_stem(word) == stem


def test_short_words_untouched():
    assert porter_stem("as") == "as"
    assert porter_stem("is") == "is"


def test_non_ascii_passes_through():
    assert porter_stem("café") == "café"
    assert porter_stem("naïvely") == "naïvely"


def test_punctuation_passes_through():
    assert porter_stem(".") == "."


@pytest.mark.parametrize("word", [w for w, s in REFERENCE if not s.endswith(("s", "e"))])
def test_idempotent_on_reference_outputs(word):
    s = porter_stem(word)
    assert porter_stem(s) == s


def test_stems_ending_in_s_or_e_can_shrink_again():
    # a second pass re-applies step 1a / 5a; the reference output wins
    assert porter_stem(porter_stem("agreed")) == "agr"
    assert porter_stem(porter_stem("cease")) == "cea"


@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=0, max_size=12))
def test_never_longer_than_input_plus_one(word):
    # step 1b may restore a final e, nothing else lengthens a word
    assert len(porter_stem(word)) <= len(word) + 1
