# Copyright (c) orepa contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Validate shipped specs and CLI-written checkpoints against the block-spec schema.

usage: validate_specs.py SCHEMA SPEC_DIR CLI
"""
import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema

BAD = [
    {"in_ch": 1, "out_ch": 1},
    {"in_ch": 1, "out_ch": 1, "preset": "orepa3x3", "colour": "red"},
    {"in_ch": 1, "out_ch": 1, "preset": "orepa3x3", "branches": [[{"kind": "conv"}]]},
    {"in_ch": 0, "out_ch": 1, "preset": "orepa3x3"},
    {"in_ch": 1, "out_ch": 1, "preset": "orepa3x3", "dtype": "f16"},
    {"in_ch": 1, "out_ch": 1, "branches": [[{"kind": "warp"}]]},
    {"in_ch": 1, "out_ch": 1, "branches": [[{"kind": "conv", "size": 3}]]},
    {"in_ch": 1, "out_ch": 1, "branches": [[{"kind": "conv"}]], "options": {}},
    {"in_ch": 1, "out_ch": 1, "preset": "orepa3x3", "options": {"depth": 2}},
]


def main():
    schema_path, spec_dir, cli = sys.argv[1:4]
    schema = json.loads(pathlib.Path(schema_path).read_text())
    jsonschema.Draft7Validator.check_schema(schema)
    validator = jsonschema.Draft7Validator(schema)
    failures = 0

    specs = sorted(pathlib.Path(spec_dir).glob("*.json"))
    for path in specs:
        errors = list(validator.iter_errors(json.loads(path.read_text())))
        if errors:
            failures += 1
            print(f"FAIL {path.name}: {errors[0].message}")
        else:
            print(f"ok   {path.name}")

    for doc in BAD:
        if validator.is_valid(doc):
            failures += 1
            print(f"FAIL accepted invalid document {json.dumps(doc)}")

    with tempfile.TemporaryDirectory() as tmp:
        for name in ("orepa3x3.json", "orepavgg.json", "single_conv.json"):
            ckpt = pathlib.Path(tmp) / f"{name}.ckpt.json"
            subprocess.run([cli, "train-toy", str(pathlib.Path(spec_dir) / name), "--steps", "2", "--hw", "4", "4",
                            "--ckpt", str(ckpt)], check=True, stdout=subprocess.DEVNULL)
            errors = list(validator.iter_errors(json.loads(ckpt.read_text())))
            if errors:
                failures += 1
                print(f"FAIL checkpoint from {name}: {errors[0].message}")
            else:
                print(f"ok   checkpoint from {name}")

    print(f"{failures} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
