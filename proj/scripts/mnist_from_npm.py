#!/usr/bin/env python3
"""Builds IDX files from the digits bundled in the npm `mnist` package.

The package ships 10,000 MNIST digits (about 1,000 per class) as JSON arrays of
784 floats in [0, 1]. They are written out as
    <out>/train-images-idx3-ubyte
    <out>/train-labels-idx1-ubyte
in the standard big-endian IDX layout.
"""
import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tarball = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tarball) as tar:
        tar.extractall(workdir)
    return workdir / "package" / "src" / "digits"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/mnist", help="output directory")
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        digits = fetch_package(pathlib.Path(tmp))
        images, labels = bytearray(), bytearray()
        count = 0
        for label in range(10):
            data = json.loads((digits / f"{label}.json").read_text())["data"]
            assert len(data) % 784 == 0
            for k in range(len(data) // 784):
                pixels = data[784 * k: 784 * (k + 1)]
                images.extend(min(255, max(0, round(v * 255))) for v in pixels)
                labels.append(label)
                count += 1

    (out / "train-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, count, 28, 28) + images)
    (out / "train-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, count) + labels)
    print(f"wrote {count} digits to {out}")


if __name__ == "__main__":
    main()
