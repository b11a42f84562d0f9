/**
 * In-memory network description mirroring the engine's layer kinds, plus the
 * two reference CNN architectures (five conv3x3 + softplus + 2x2 avg-pool
 * blocks with 2,4,8,16,16 or 16,32,64,128,128 filters, then a linear readout
 * to 10 classes on 3x32x32 inputs).
 */

import { Rng } from "./rng";

export interface ConvLayer {
  kind: "conv";
  outChannels: number;
  kernelSize: number;
  stride: number;
  padding: number;
  /** [out][in][kh][kw], C-order */
  weights: Float32Array;
  bias: Float32Array | null;
}

export interface LinearLayer {
  kind: "linear";
  outFeatures: number;
  inFeatures: number;
  /** row-major [out][in] */
  weights: Float32Array;
  bias: Float32Array | null;
}

export interface ActivationLayer {
  kind: "activation";
  fn: "softplus" | "identity";
}

export interface AvgPoolLayer {
  kind: "avgpool";
  window: number;
}

export type Layer = ConvLayer | LinearLayer | ActivationLayer | AvgPoolLayer;

export interface NetworkModel {
  inputShape: [number, number, number]; // (channels, height, width)
  layers: Layer[];
}

export const SMALL_FILTERS = [2, 4, 8, 16, 16];
export const LARGE_FILTERS = [16, 32, 64, 128, 128];
export const NUM_CLASSES = 10;

export type ReferenceArch = "small" | "large";

export function buildReferenceModel(which: ReferenceArch, seed = 0): NetworkModel {
  const filters = which === "small" ? SMALL_FILTERS : LARGE_FILTERS;
  const rng = new Rng(0xc0ffee ^ seed);
  const layers: Layer[] = [];
  let inCh = 3;
  for (const outCh of filters) {
    const fanIn = inCh * 9;
    layers.push({
      kind: "conv",
      outChannels: outCh,
      kernelSize: 3,
      stride: 1,
      padding: 1,
      weights: rng.normals(outCh * inCh * 9, 1.0 / Math.sqrt(fanIn)),
      bias: rng.normals(outCh, 0.05),
    });
    layers.push({ kind: "activation", fn: "softplus" });
    layers.push({ kind: "avgpool", window: 2 });
    inCh = outCh;
  }
  // after five 2x pools of 32x32 the spatial grid is 1x1, so the readout
  // consumes the flattened channel vector
  layers.push({
    kind: "linear",
    outFeatures: NUM_CLASSES,
    inFeatures: inCh,
    weights: rng.normals(NUM_CLASSES * inCh, 1.0 / Math.sqrt(inCh)),
    bias: rng.normals(NUM_CLASSES, 0.05),
  });
  return { inputShape: [3, 32, 32], layers };
}

/** Shape chaining with the same rules the engine enforces. */
export function outputShapes(model: NetworkModel): number[][] {
  let shape: number[] = [...model.inputShape];
  const out: number[][] = [];
  for (const [idx, layer] of model.layers.entries()) {
    if (layer.kind === "conv") {
      if (shape.length !== 3) throw new Error(`layer ${idx}: conv after flattening`);
      const [c, h, w] = shape;
      if (layer.weights.length !== layer.outChannels * c * layer.kernelSize * layer.kernelSize) {
        throw new Error(`layer ${idx}: conv weight count mismatch`);
      }
      const ho = Math.floor((h + 2 * layer.padding - layer.kernelSize) / layer.stride) + 1;
      const wo = Math.floor((w + 2 * layer.padding - layer.kernelSize) / layer.stride) + 1;
      if (ho < 1 || wo < 1) throw new Error(`layer ${idx}: empty conv output`);
      shape = [layer.outChannels, ho, wo];
    } else if (layer.kind === "linear") {
      const flat = shape.reduce((a, b) => a * b, 1);
      if (layer.inFeatures !== flat) {
        throw new Error(`layer ${idx}: linear expects ${layer.inFeatures}, upstream provides ${flat}`);
      }
      shape = [layer.outFeatures];
    } else if (layer.kind === "activation") {
      if (layer.fn !== "softplus" && layer.fn !== "identity") {
        throw new Error(`layer ${idx}: unsupported activation ${(layer as ActivationLayer).fn}`);
      }
    } else if (layer.kind === "avgpool") {
      if (shape.length !== 3) throw new Error(`layer ${idx}: avgpool after flattening`);
      const [c, h, w] = shape;
      if (h % layer.window || w % layer.window) {
        throw new Error(`layer ${idx}: pool window ${layer.window} does not divide ${h}x${w}`);
      }
      shape = [c, h / layer.window, w / layer.window];
    } else {
      throw new Error(`layer ${idx}: unsupported layer kind ${(layer as Layer).kind}`);
    }
    out.push([...shape]);
  }
  return out;
}
