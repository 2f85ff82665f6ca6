// SPDX-License-Identifier: Apache-2.0
//
// Full-reference fidelity metrics on the [0,1] convention. PSNR uses
// MAX = 1 (equivalent to the 255-scale convention for 8-bit content).

#pragma once

#include "clearair/image.hpp"

namespace clearair::metrics {

// 10*log10(1/MSE) in dB; +infinity for identical images.
double psnr(const ImageTensor& a, const ImageTensor& b);

// Mean local SSIM over valid 11x11 windows (Gaussian sigma 1.5,
// k1 = 0.01, k2 = 0.03). RGB converts to luma first. Throws MetricError
// when the image is smaller than the window.
double ssim(const ImageTensor& a, const ImageTensor& b);

} // namespace clearair::metrics
