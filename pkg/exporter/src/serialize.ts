/**
 * Writers and readers for the engine's on-disk format: a JSON manifest plus
 * a sidecar blob of little-endian float32, with per-layer element offsets.
 * Exports are byte-identical for identical model weights.
 */

import * as fs from "fs";
import * as path from "path";

import { Layer, NetworkModel, outputShapes } from "./model";

interface BlobRef {
  offset: number;
  count: number;
}

export function writeNetwork(model: NetworkModel, manifestPath: string, blobName?: string): void {
  outputShapes(model); // validates the chain and rejects unsupported layers
  const blob = blobName ?? path.basename(manifestPath).replace(/\.json$/, "") + ".bin";
  const chunks: Float32Array[] = [];
  let offset = 0;
  const push = (arr: Float32Array): BlobRef => {
    chunks.push(arr);
    const ref = { offset, count: arr.length };
    offset += arr.length;
    return ref;
  };

  const entries: object[] = [];
  for (const layer of model.layers) {
    if (layer.kind === "conv") {
      entries.push({
        kind: "conv",
        out_channels: layer.outChannels,
        kernel_size: layer.kernelSize,
        stride: layer.stride,
        padding: layer.padding,
        weights: push(layer.weights),
        bias: layer.bias ? push(layer.bias) : null,
      });
    } else if (layer.kind === "linear") {
      entries.push({
        kind: "linear",
        out_features: layer.outFeatures,
        in_features: layer.inFeatures,
        weights: push(layer.weights),
        bias: layer.bias ? push(layer.bias) : null,
      });
    } else if (layer.kind === "activation") {
      entries.push({ kind: "activation", fn: layer.fn });
    } else if (layer.kind === "avgpool") {
      entries.push({ kind: "avgpool", window: layer.window });
    } else {
      throw new Error(`unsupported layer kind ${(layer as Layer).kind}`);
    }
  }

  const doc = {
    format: "memse-network",
    version: 1,
    input_shape: model.inputShape,
    blob,
    layers: entries,
  };
  fs.writeFileSync(manifestPath, stableJson(doc) + "\n", "utf-8");
  fs.writeFileSync(path.join(path.dirname(manifestPath), blob), concatFloat32(chunks, offset));
}

export function writeInputs(
  batch: Float32Array,
  shape: [number, number, number, number],
  manifestPath: string,
  labels?: number[],
  blobName?: string
): void {
  const total = shape.reduce((a, b) => a * b, 1);
  if (batch.length !== total) {
    throw new Error(`batch has ${batch.length} elements, shape needs ${total}`);
  }
  if (labels && labels.length !== shape[0]) {
    throw new Error(`${labels.length} labels for batch of ${shape[0]}`);
  }
  const blob = blobName ?? path.basename(manifestPath).replace(/\.json$/, "") + ".bin";
  const doc = {
    format: "memse-inputs",
    version: 1,
    shape,
    blob,
    labels: labels ?? null,
  };
  fs.writeFileSync(manifestPath, stableJson(doc) + "\n", "utf-8");
  fs.writeFileSync(path.join(path.dirname(manifestPath), blob), concatFloat32([batch], batch.length));
}

export function readNetwork(manifestPath: string): NetworkModel {
  const doc = JSON.parse(fs.readFileSync(manifestPath, "utf-8"));
  if (doc.format !== "memse-network" || doc.version !== 1) {
    throw new Error(`${manifestPath}: not a memse-network v1 manifest`);
  }
  const raw = fs.readFileSync(path.join(path.dirname(manifestPath), doc.blob));
  const blob = new Float32Array(raw.buffer, raw.byteOffset, raw.byteLength / 4);
  const slice = (ref: BlobRef, what: string): Float32Array => {
    if (ref.offset < 0 || ref.count < 0 || ref.offset + ref.count > blob.length) {
      throw new Error(`${what}: blob reference out of range`);
    }
    return blob.slice(ref.offset, ref.offset + ref.count);
  };

  const layers: Layer[] = [];
  for (const [idx, entry] of (doc.layers as any[]).entries()) {
    const where = `${manifestPath} layer ${idx}`;
    if (entry.kind === "conv") {
      layers.push({
        kind: "conv",
        outChannels: entry.out_channels,
        kernelSize: entry.kernel_size,
        stride: entry.stride ?? 1,
        padding: entry.padding ?? Math.floor(entry.kernel_size / 2),
        weights: slice(entry.weights, where),
        bias: entry.bias ? slice(entry.bias, where) : null,
      });
    } else if (entry.kind === "linear") {
      layers.push({
        kind: "linear",
        outFeatures: entry.out_features,
        inFeatures: entry.in_features,
        weights: slice(entry.weights, where),
        bias: entry.bias ? slice(entry.bias, where) : null,
      });
    } else if (entry.kind === "activation") {
      layers.push({ kind: "activation", fn: entry.fn });
    } else if (entry.kind === "avgpool") {
      layers.push({ kind: "avgpool", window: entry.window });
    } else {
      throw new Error(`${where}: unsupported layer kind ${entry.kind}`);
    }
  }
  const model: NetworkModel = { inputShape: doc.input_shape, layers };
  outputShapes(model); // validate
  return model;
}

function concatFloat32(chunks: Float32Array[], total: number): Buffer {
  const buf = Buffer.alloc(total * 4);
  let pos = 0;
  for (const chunk of chunks) {
    for (let i = 0; i < chunk.length; i++) {
      buf.writeFloatLE(chunk[i], pos);
      pos += 4;
    }
  }
  return buf;
}

/** JSON with sorted keys so exports are byte-stable. */
function stableJson(value: unknown): string {
  return JSON.stringify(sortKeys(value), null, 2);
}

function sortKeys(value: any): any {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value && typeof value === "object") {
    const out: Record<string, any> = {};
    for (const key of Object.keys(value).sort()) out[key] = sortKeys(value[key]);
    return out;
  }
  return value;
}
