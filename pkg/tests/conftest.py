import numpy as np
import pytest

from facekit.morphable import assemble_tensor, tucker_decompose
from facekit.synthetic import (
    N_ID_FIELDS,
    SyntheticSpec,
    default_expression_params,
    generate_subject,
    synthetic_albedo_model,
)


@pytest.fixture(scope="session")
def tiny_population():
    """8 identities x 4 expressions of tiny-tier truth base meshes."""
    rng = np.random.default_rng(5)
    ids = rng.normal(0.0, 1.0, (8, N_ID_FIELDS))
    exps = default_expression_params(4)
    grid = []
    subjects = []
    for i in range(8):
        subj = generate_subject(SyntheticSpec(id_params=ids[i], exp_params=exps, tier="tiny"), 4)
        subjects.append(subj)
        grid.append([subj.base_mesh(e) for e in range(4)])
    return {"grid": grid, "subjects": subjects, "id_rows": ids, "exp_rows": exps}


@pytest.fixture(scope="session")
def tiny_model(tiny_population):
    tensor, template = assemble_tensor(tiny_population["grid"])
    model = tucker_decompose(tensor, template, 5, 3)
    return {"model": model, "tensor": tensor, "template": template}


@pytest.fixture(scope="session")
def tiny_albedo(tiny_model):
    return synthetic_albedo_model(tiny_model["model"].template_mesh(), k=6, seed=3)
