# Copyright 2026 The peftlab Authors
# SPDX-License-Identifier: Apache-2.0
"""Byte-level encoding of the first xml_basic record under the default template.

Writes one "token mask" pair per line; the output is frozen as
tests/golden/asthma_1.example.txt.
"""
import sys

BOS, EOS, OFFSET = 1, 2, 4
question = "What is (are) Asthma ?"
qtype = "information"
answer = ("Asthma is a long-term disease of the airways. The airways swell and narrow, "
          "which makes breathing hard.")

prompt = [BOS] + [b + OFFSET for b in f"Question: {question}\nType: {qtype}\nAnswer: ".encode()]
body = [b + OFFSET for b in answer.encode()] + [EOS]
for t in prompt:
    sys.stdout.write(f"{t} 0\n")
for t in body:
    sys.stdout.write(f"{t} 1\n")
