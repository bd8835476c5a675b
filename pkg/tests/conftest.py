import numpy as np
import pytest
import torch

from teata.config import from_dict
from teata.data import generate_synthetic_domain


def make_domains(root, states=("SC", "CC"), num_identities=8, images_per_identity=8):
    """Generate one toy domain per clothing state under root; returns names."""
    names = []
    for i, state in enumerate(states):
        name = f"d{i + 1}_{state.lower()}"
        generate_synthetic_domain(
            root / name,
            name=name,
            seed=i,
            num_identities=num_identities,
            images_per_identity=images_per_identity,
            clothing_state=state,
            num_cameras=3,
            noise_std=0.05,
        )
        names.append(name)
    return names


def make_config(root, domains, unseen=(), **train_overrides):
    """Toy run config: small batches and LRs that move a from-scratch encoder."""
    train = {
        "method": "TEATA",
        "stage1_epochs": 3,
        "stage2_epochs": 4,
        "batch_size": 16,
        "instances_per_identity": 4,
        "stage1_lr": 2e-3,
        "stage2_warmup_start": 2e-4,
        "stage2_peak_lr": 2e-3,
        "stage2_warmup_epochs": 2,
        "seed": 0,
    }
    train.update(train_overrides)
    return from_dict(
        {
            "data": {"root": str(root), "domains": list(domains), "unseen": list(unseen)},
            "train": train,
        }
    )


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def sc_domain(tmp_path):
    return generate_synthetic_domain(
        tmp_path / "sc",
        name="toy_sc",
        seed=0,
        num_identities=8,
        images_per_identity=8,
        clothing_state="SC",
        num_cameras=3,
        noise_std=0.05,
    )


@pytest.fixture
def cc_domain(tmp_path):
    return generate_synthetic_domain(
        tmp_path / "cc",
        name="toy_cc",
        seed=1,
        num_identities=8,
        images_per_identity=8,
        clothing_state="CC",
        num_cameras=3,
        noise_std=0.05,
    )


def assert_close(a, b, tol=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert np.max(np.abs(a - b)) < tol, f"max deviation {np.max(np.abs(a - b))}"
