"""Tests for the plant_field constants module."""

from plant_field.const import (
    CLASS_BY_NAME,
    CLASS_FLOWER,
    CLASS_FRUIT,
    CLASS_LEAF,
    CLASS_STEM,
    DOMAIN,
    NUM_CLASSES,
    SEMANTIC_CLASSES,
    T_FAR,
    T_NEAR,
)


def test_semantic_classes() -> None:
    """Test class ids start at one and the names map back to them."""
    assert (CLASS_STEM, CLASS_LEAF, CLASS_FRUIT, CLASS_FLOWER) == (1, 2, 3, 4)
    assert NUM_CLASSES == len(SEMANTIC_CLASSES) == 4
    assert CLASS_BY_NAME["leaf"] == CLASS_LEAF


def test_constants_exist() -> None:
    """Test that expected constants are defined."""
    assert DOMAIN == "plant_field"
    assert 0 < T_NEAR < T_FAR
