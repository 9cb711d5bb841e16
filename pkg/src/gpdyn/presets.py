"""Built-in schemas and models.

``EMA_SCHEMA`` mirrors the seven daily mood-diary questions (scored 1-10),
with mood and sleep as prediction targets. ``reported_model`` is a
one-parameter model for that schema and the default ground truth for
synthetic cohorts.
"""

from __future__ import annotations

from .model import ModelGenotype, StateSchema, parse

EMA_STATES = ("mood", "worrying", "self_esteem", "sleep", "activities", "enjoyed", "social")

EMA_SCHEMA = StateSchema(
    names=EMA_STATES,
    target_indices=(0, 3),
    raw_scale=((1.0, 10.0),) * len(EMA_STATES),
)

REPORTED_MODEL_TEXT = """\
mood(t+1) = mood(t) + g1 * (sleep(t) * (g1 - mood(t)))
worrying(t+1) = (enjoyed(t) - social(t)) * (enjoyed(t) - self_esteem(t)) * ((enjoyed(t) - social(t)) * social(t))
self_esteem(t+1) = mood(t)
sleep(t+1) = sleep(t)
activities(t+1) = social(t)
enjoyed(t+1) = self_esteem(t)
social(t+1) = ((worrying(t) - (g1 - social(t))) * (worrying(t) * sleep(t))) + (((worrying(t) - (g1 - social(t))) * (sleep(t) * sleep(t))) + g1)
"""

RELAX_SCHEMA = StateSchema.unit(("s1", "s2"))

RELAX_MODEL_TEXT = """\
s1(t+1) = s1(t) + g1 * (s2(t) - s1(t))
s2(t+1) = s2(t)
"""


def reported_model() -> ModelGenotype:
    return parse(REPORTED_MODEL_TEXT, EMA_SCHEMA, lambda_max=7)


def relaxation_model() -> ModelGenotype:
    """``s1`` relaxes toward ``s2`` at a per-patient rate; ``s2`` persists."""
    return parse(RELAX_MODEL_TEXT, RELAX_SCHEMA, lambda_max=7)


def persistence_model(schema: StateSchema, lambda_max: int = 7) -> ModelGenotype:
    text = "\n".join(f"{n}(t+1) = {n}(t)" for n in schema.names)
    return parse(text, schema, lambda_max)
