/**
 * export --arch small|large|custom [--ckpt path] --out dir [--inputs N]
 *        [--seed S]
 *
 * Writes net.json + net.bin (and inputs.json + inputs.bin when --inputs is
 * given) in the engine's manifest+blob format.  "custom" re-exports an
 * existing engine network file given via --ckpt.
 */

import * as fs from "fs";
import * as path from "path";

import { buildReferenceModel, NetworkModel } from "./model";
import { readNetwork, writeInputs, writeNetwork } from "./serialize";
import { Rng } from "./rng";

interface Args {
  arch: "small" | "large" | "custom";
  ckpt?: string;
  out: string;
  inputs?: number;
  seed: number;
}

function parseArgs(argv: string[]): Args {
  if (argv[0] !== "export") {
    throw new Error(`unknown command ${argv[0] ?? "(none)"}; usage: export --arch small|large|custom --out dir`);
  }
  const args: Partial<Args> = { seed: 0 };
  for (let i = 1; i < argv.length; i++) {
    const flag = argv[i];
    const value = argv[i + 1];
    switch (flag) {
      case "--arch":
        if (value !== "small" && value !== "large" && value !== "custom") {
          throw new Error(`--arch must be small, large, or custom, got ${value}`);
        }
        args.arch = value;
        i++;
        break;
      case "--ckpt":
        args.ckpt = value;
        i++;
        break;
      case "--out":
        args.out = value;
        i++;
        break;
      case "--inputs":
        args.inputs = Number.parseInt(value, 10);
        i++;
        break;
      case "--seed":
        args.seed = Number.parseInt(value, 10);
        i++;
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!args.arch) throw new Error("--arch is required");
  if (!args.out) throw new Error("--out is required");
  if (args.arch === "custom" && !args.ckpt) throw new Error("--arch custom requires --ckpt");
  if (args.inputs !== undefined && (!Number.isFinite(args.inputs) || args.inputs < 1)) {
    throw new Error("--inputs must be a positive integer");
  }
  return args as Args;
}

export function run(argv: string[]): number {
  const args = parseArgs(argv);
  fs.mkdirSync(args.out, { recursive: true });

  let model: NetworkModel;
  if (args.arch === "custom") {
    model = readNetwork(args.ckpt as string);
  } else {
    model = buildReferenceModel(args.arch, args.seed);
    if (args.ckpt) model = readNetwork(args.ckpt); // checkpoint overrides random init
  }
  writeNetwork(model, path.join(args.out, "net.json"));

  if (args.inputs) {
    const [c, h, w] = model.inputShape;
    const rng = new Rng(0xbadc0de ^ args.seed);
    const batch = rng.uniforms(args.inputs * c * h * w);
    writeInputs(batch, [args.inputs, c, h, w], path.join(args.out, "inputs.json"));
  }
  return 0;
}

if (require.main === module) {
  try {
    process.exit(run(process.argv.slice(2)));
  } catch (err) {
    console.error(`export: ${(err as Error).message}`);
    process.exit(2);
  }
}
