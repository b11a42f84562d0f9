/**
 * Framework-side forward pass over the in-memory model, used as the
 * independent oracle for round-trip checks against the engine.
 *
 * Inputs and weights follow the engine's channel-major layout; tensors are
 * converted to the framework's channels-last layout at the boundary, and
 * back to channel-major before flattening so linear layers see the same
 * index order as the engine.
 */

import * as tf from "@tensorflow/tfjs";

import { NetworkModel } from "./model";

export function frameworkForward(model: NetworkModel, batchChw: Float32Array, batchSize: number): Float32Array {
  const [c, h, w] = model.inputShape;
  return tf.tidy(() => {
    let cur: tf.Tensor = tf.tensor4d(batchChw, [batchSize, c, h, w]).transpose([0, 2, 3, 1]); // NHWC
    let flattened = false;
    for (const layer of model.layers) {
      if (layer.kind === "conv") {
        if (flattened) throw new Error("conv after flattening");
        const inCh = cur.shape[3] as number;
        const k = layer.kernelSize;
        // [out][in][kh][kw] -> [kh][kw][in][out]
        const kernel = tf
          .tensor4d(layer.weights, [layer.outChannels, inCh, k, k])
          .transpose([2, 3, 1, 0]);
        const padded = tf.pad(cur as tf.Tensor4D, [
          [0, 0],
          [layer.padding, layer.padding],
          [layer.padding, layer.padding],
          [0, 0],
        ]);
        cur = tf.conv2d(padded as tf.Tensor4D, kernel as tf.Tensor4D, layer.stride, "valid");
        if (layer.bias) cur = tf.add(cur, tf.tensor1d(layer.bias));
      } else if (layer.kind === "avgpool") {
        if (flattened) throw new Error("avgpool after flattening");
        cur = tf.avgPool(cur as tf.Tensor4D, layer.window, layer.window, "valid");
      } else if (layer.kind === "activation") {
        if (layer.fn === "softplus") cur = tf.softplus(cur);
      } else if (layer.kind === "linear") {
        if (!flattened) {
          cur = (cur as tf.Tensor4D).transpose([0, 3, 1, 2]).reshape([batchSize, -1]);
          flattened = true;
        }
        const wMat = tf.tensor2d(layer.weights, [layer.outFeatures, layer.inFeatures]);
        cur = tf.matMul(cur as tf.Tensor2D, wMat, false, true);
        if (layer.bias) cur = tf.add(cur, tf.tensor1d(layer.bias));
      }
    }
    if (!flattened) {
      cur = (cur as tf.Tensor4D).transpose([0, 3, 1, 2]).reshape([batchSize, -1]);
    }
    return new Float32Array(cur.dataSync());
  });
}
