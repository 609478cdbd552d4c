import json

import pytest

from gradekit.exam import Provenance, load_exam_spec, load_scores
from gradekit.synthetic import reference_exam_spec


def make_spec_doc(parts, total_points, pages=1, exam_id="mini"):
    """Spec JSON with one problem per distinct part prefix."""
    problems = {}
    for part in parts:
        problems.setdefault(part["id"].split("-", 1)[0], []).append(part)
    return json.dumps(
        {
            "exam_id": exam_id,
            "total_points": total_points,
            "pages": pages,
            "problems": [{"id": pid, "parts": plist} for pid, plist in problems.items()],
        }
    )


@pytest.fixture(scope="session")
def reference_spec():
    return reference_exam_spec()


@pytest.fixture
def mini_spec():
    doc = make_spec_doc(
        [
            {"id": "1-A-a", "max_points": 1.0, "type": "numerical", "page": 1},
            {"id": "1-A-b", "max_points": 2.0, "type": "short_answer", "page": 1},
            {"id": "2-A-a", "max_points": 1.0, "type": "drawing", "page": 2},
            {"id": "2-A-b", "max_points": 0.5, "type": ["short_answer", "numerical"], "page": 2},
        ],
        total_points=4.5,
        pages=2,
    )
    return load_exam_spec(doc)


def scores_csv(parts, rows):
    lines = ["student," + ",".join(parts)]
    for student, values in rows:
        cells = ["" if v is None else str(v) for v in values]
        lines.append(f"{student}," + ",".join(cells))
    return "\n".join(lines) + "\n"


@pytest.fixture
def mini_truth(mini_spec):
    text = scores_csv(
        mini_spec.part_ids,
        [
            (1, [1.0, 2.0, 0.5, 0.5]),
            (2, [0.25, 1.5, 1.0, 0.0]),
            (3, [0.0, 0.75, 0.25, 0.25]),
        ],
    )
    return load_scores(text, mini_spec, Provenance.GROUND_TRUTH)
