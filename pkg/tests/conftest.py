import numpy as np
import pytest

from grmeval.model import Item, ItemParameters


@pytest.fixture
def dichotomous_item():
    return Item(item_id="d1", discrimination=1.0, thresholds=(0.0,))


@pytest.fixture
def graded_item():
    return Item(item_id="g1", discrimination=1.5, thresholds=(-1.0, 1.0))


@pytest.fixture
def small_bank():
    """Three mixed items used by hand-oracle tests."""
    return ItemParameters(
        items=(
            Item("a", 1.0, (0.0,)),
            Item("b", 1.5, (-1.0, 1.0)),
            Item("c", 0.7, (-0.5, 0.2, 1.3)),
        )
    )


def random_bank(rng: np.random.Generator, n_items: int, n_categories: int,
                lam_range=(0.8, 2.5), tau_range=(-2.0, 2.0), min_gap=0.25) -> ItemParameters:
    """Seeded bank with spread thresholds so every category is reachable."""
    items = []
    for i in range(n_items):
        lam = rng.uniform(*lam_range)
        while True:
            tau = np.sort(rng.uniform(*tau_range, size=n_categories - 1))
            if n_categories == 2 or np.min(np.diff(tau)) >= min_gap:
                break
        items.append(Item(f"item_{i + 1}", float(lam), tuple(tau)))
    return ItemParameters(items=tuple(items))
