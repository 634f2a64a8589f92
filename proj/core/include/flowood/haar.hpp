#pragma once

#include "flowood/tensor.hpp"

#include <vector>

namespace flowood {

// One orthonormal 2D Haar analysis step. For each 2x2 block [[a,b],[c,d]]:
//   low = (a+b+c+d)/2, h = (a+b-c-d)/2, v = (a-b+c-d)/2, d = (a-b-c+d)/2.
// Orthonormal scaling makes the step volume preserving (logdet 0), so the
// pyramid contributes nothing to a flow's likelihood.
struct HaarCoeffs {
    Tensor low;    // C x h x w (or N x C x h x w)
    Tensor detail; // 3C: channels (3c, 3c+1, 3c+2) = (h, v, d) of input channel c
};

// Accepts [C, 2h, 2w] or [N, C, 2h, 2w]; output rank matches input.
HaarCoeffs haar_analyze(const Tensor& img);
Tensor haar_synthesize(const Tensor& low, const Tensor& detail);

// Cascade of analyses down to a 1x1 low-pass image.
//   lows[i]    = I_i with side 2^i, i in 0..n
//   details[i] = D_i with side 2^i, i in 0..n-1, where (I_i, D_i) -> I_{i+1}
struct HaarPyramid {
    std::vector<Tensor> lows;
    std::vector<Tensor> details;

    int levels() const { return static_cast<int>(details.size()); }
};

// img must be square with power-of-two extent.
HaarPyramid build_pyramid(const Tensor& img);

// Cascaded synthesis from I_0 and all detail stacks back to the image.
Tensor reconstruct(const HaarPyramid& pyramid);

} // namespace flowood
