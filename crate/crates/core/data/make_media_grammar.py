"""Regenerates media_grammar.tsv: 100 carrier templates and 2000 invented
media entities, both with Zipf priors. Deterministic for a fixed seed."""

import random

SEED = 20231015
N_TEMPLATES = 100
N_ENTITIES = 2000

rng = random.Random(SEED)

verbs = ["play", "put on", "start", "queue", "shuffle", "listen to", "i want to hear",
         "can you play", "please play", "resume", "find", "search for", "open",
         "add", "stream", "turn on", "let me hear", "show me", "pull up", "give me"]
tails = ["", " please", " now", " on my speaker", " in the kitchen", " for me",
         " on repeat", " next", " by the band", " from my library", " in the car",
         " right now", " again", " on the radio", " loudly"]

templates = set()
while len(templates) < N_TEMPLATES:
    templates.add(f"{rng.choice(verbs)} {{entity}}{rng.choice(tails)}")
templates = sorted(templates)
rng.shuffle(templates)

onsets = ["b", "br", "c", "ch", "d", "dr", "f", "fl", "g", "gr", "h", "j", "k", "l",
          "m", "n", "p", "pl", "r", "s", "sh", "sl", "st", "t", "tr", "v", "w", "z"]
nuclei = ["a", "e", "i", "o", "u", "ai", "ea", "oo", "ou", "y"]
codas = ["", "", "n", "r", "s", "t", "ck", "ld", "ng", "x", "m"]


def word():
    return "".join(rng.choice(onsets) + rng.choice(nuclei) + rng.choice(codas)
                   for _ in range(rng.choice([1, 1, 2, 2, 3])))


entities = set()
while len(entities) < N_ENTITIES:
    entities.add(" ".join(word() for _ in range(rng.choice([1, 2, 2, 3]))))
entities = sorted(entities)
rng.shuffle(entities)

with open("media_grammar.tsv", "w") as f:
    f.write("# synthetic media grammar: weights follow 1/rank\n")
    f.write("[templates]\n")
    for r, t in enumerate(templates, 1):
        f.write(f"{t}\t{1.0 / r:.10g}\n")
    f.write("[entities]\n")
    for r, e in enumerate(entities, 1):
        f.write(f"{e}\t{1.0 / r:.10g}\n")
