import { execFileSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import { afterAll, describe, expect, it } from "vitest";

import { run } from "../src/cli";
import { frameworkForward } from "../src/forward";
import {
  buildReferenceModel,
  LARGE_FILTERS,
  NetworkModel,
  outputShapes,
  SMALL_FILTERS,
} from "../src/model";
import { readNetwork, writeInputs, writeNetwork } from "../src/serialize";
import { Rng } from "../src/rng";

const tmpRoot = fs.mkdtempSync(path.join(os.tmpdir(), "memse-exporter-"));
afterAll(() => fs.rmSync(tmpRoot, { recursive: true, force: true }));

function tmpDir(name: string): string {
  const dir = path.join(tmpRoot, name);
  fs.mkdirSync(dir, { recursive: true });
  return dir;
}

function convChannels(model: NetworkModel): number[] {
  return model.layers.filter((l) => l.kind === "conv").map((l: any) => l.outChannels);
}

describe("reference architectures", () => {
  it("small model has the published filter counts", () => {
    const model = buildReferenceModel("small");
    expect(convChannels(model)).toEqual(SMALL_FILTERS);
  });

  it("large model has the published filter counts", () => {
    const model = buildReferenceModel("large");
    expect(convChannels(model)).toEqual(LARGE_FILTERS);
  });

  it("both models end in a 10-way readout", () => {
    for (const which of ["small", "large"] as const) {
      const shapes = outputShapes(buildReferenceModel(which));
      expect(shapes[shapes.length - 1]).toEqual([10]);
    }
  });

  it("model construction is deterministic per seed", () => {
    const a = buildReferenceModel("small", 7);
    const b = buildReferenceModel("small", 7);
    const c = buildReferenceModel("small", 8);
    expect(Buffer.from((a.layers[0] as any).weights.buffer)).toEqual(
      Buffer.from((b.layers[0] as any).weights.buffer)
    );
    expect((a.layers[0] as any).weights[0]).not.toEqual((c.layers[0] as any).weights[0]);
  });
});

describe("serialization", () => {
  it("identity linear round-trips exactly", () => {
    const dir = tmpDir("identity");
    const model: NetworkModel = {
      inputShape: [2, 1, 1],
      layers: [
        {
          kind: "linear",
          outFeatures: 2,
          inFeatures: 2,
          weights: new Float32Array([1, 0, 0, 1]),
          bias: null,
        },
      ],
    };
    writeNetwork(model, path.join(dir, "net.json"));
    const back = readNetwork(path.join(dir, "net.json"));
    expect(Array.from((back.layers[0] as any).weights)).toEqual([1, 0, 0, 1]);
  });

  it("export is byte-identical across runs", () => {
    const a = tmpDir("det-a");
    const b = tmpDir("det-b");
    const model = buildReferenceModel("small", 3);
    writeNetwork(model, path.join(a, "net.json"));
    writeNetwork(model, path.join(b, "net.json"));
    for (const name of ["net.json", "net.bin"]) {
      expect(fs.readFileSync(path.join(a, name))).toEqual(fs.readFileSync(path.join(b, name)));
    }
  });

  it("unsupported layer kinds fail loudly", () => {
    const dir = tmpDir("bad");
    const model = buildReferenceModel("small");
    (model.layers[2] as any).kind = "maxpool";
    expect(() => writeNetwork(model, path.join(dir, "net.json"))).toThrow(/unsupported|pool/);
  });

  it("input batches carry the full (B,C,H,W) shape", () => {
    const dir = tmpDir("inputs");
    const rng = new Rng(1);
    writeInputs(rng.uniforms(100 * 3 * 32 * 32), [100, 3, 32, 32], path.join(dir, "inputs.json"));
    const doc = JSON.parse(fs.readFileSync(path.join(dir, "inputs.json"), "utf-8"));
    expect(doc.shape).toEqual([100, 3, 32, 32]);
    expect(fs.statSync(path.join(dir, "inputs.bin")).size).toBe(100 * 3 * 32 * 32 * 4);
  });

  it("custom re-export of a checkpoint is byte-identical", () => {
    const src = tmpDir("ck-src");
    const dst = tmpDir("ck-dst");
    expect(run(["export", "--arch", "small", "--seed", "5", "--out", src])).toBe(0);
    expect(run(["export", "--arch", "custom", "--ckpt", path.join(src, "net.json"), "--out", dst])).toBe(0);
    expect(fs.readFileSync(path.join(dst, "net.bin"))).toEqual(fs.readFileSync(path.join(src, "net.bin")));
    expect(fs.readFileSync(path.join(dst, "net.json"))).toEqual(fs.readFileSync(path.join(src, "net.json")));
  });

  it("cli validates its arguments", () => {
    expect(() => run(["export", "--arch", "tiny", "--out", "x"])).toThrow(/--arch/);
    expect(() => run(["export", "--arch", "custom", "--out", "x"])).toThrow(/--ckpt/);
    expect(() => run(["frobnicate"])).toThrow(/unknown command/);
  });
});

describe("round-trip against the engine", () => {
  // engine reference outputs for an exported network must match the
  // framework forward within 1e-4 absolute on 10 random inputs
  function engineReferenceOutputs(dir: string): number[][] {
    const config = {
      network: "net.json",
      inputs: "inputs.json",
      output: "engine-out",
      seed: 0,
      quantize: false,
      crossbar: { g_max: "auto", n_levels: 128, sigma_v: 0.0, r: 1.0 },
    };
    fs.writeFileSync(path.join(dir, "run.json"), JSON.stringify(config));
    execFileSync("python3", ["-m", "memse", "predict", "--config", "run.json", "--no-quant"], {
      cwd: dir,
      stdio: ["ignore", "pipe", "pipe"],
    });
    const csv = fs.readFileSync(path.join(dir, "engine-out", "reference_outputs.csv"), "utf-8");
    return csv
      .trim()
      .split("\n")
      .slice(1)
      .map((line) => line.split(",").slice(1).map(Number));
  }

  for (const which of ["small", "large"] as const) {
    it(`${which} architecture agrees within 1e-4`, () => {
      const dir = tmpDir(`roundtrip-${which}`);
      expect(run(["export", "--arch", which, "--seed", "11", "--out", dir, "--inputs", "10"])).toBe(0);
      const model = readNetwork(path.join(dir, "net.json"));

      const inputsDoc = JSON.parse(fs.readFileSync(path.join(dir, "inputs.json"), "utf-8"));
      const raw = fs.readFileSync(path.join(dir, inputsDoc.blob));
      const batch = new Float32Array(raw.buffer, raw.byteOffset, raw.byteLength / 4);
      const framework = frameworkForward(model, batch, 10);

      const engine = engineReferenceOutputs(dir);
      expect(engine.length).toBe(10);
      let worst = 0;
      for (let b = 0; b < 10; b++) {
        for (let j = 0; j < 10; j++) {
          worst = Math.max(worst, Math.abs(engine[b][j] - framework[b * 10 + j]));
        }
      }
      expect(worst).toBeLessThan(1e-4);
    }, 180_000);
  }
});
