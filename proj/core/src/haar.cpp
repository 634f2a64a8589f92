#include "flowood/haar.hpp"

#include "flowood/errors.hpp"

#include <algorithm>

namespace flowood {

namespace {

std::vector<std::int64_t> strided(std::int64_t count, std::int64_t stride, std::int64_t offset) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = i * stride + offset;
    return idx;
}

// grouped [k*C + c] -> interleaved [c*K + k]
std::vector<std::int64_t> interleave_perm(std::int64_t C, std::int64_t K) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(C * K));
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t k = 0; k < K; ++k) perm[static_cast<std::size_t>(c * K + k)] = k * C + c;
    return perm;
}

} // namespace

HaarCoeffs haar_analyze(const Tensor& img) {
    const bool batched = img.rank() == 4;
    if (!batched && img.rank() != 3)
        throw ShapeError("haar_analyze: expected [C,H,W] or [N,C,H,W], got " + shape_str(img.shape()));
    Tensor x = batched ? img : reshape(img, {1, img.shape()[0], img.shape()[1], img.shape()[2]});
    const Shape& s = x.shape();
    if (s[2] % 2 != 0 || s[3] % 2 != 0)
        throw ShapeError("haar_analyze: extents must be even, got " + shape_str(img.shape()));
    const std::int64_t C = s[1];

    Tensor blocks = squeeze2x2(x); // per input channel: (a, b, c, d) = (TL, TR, BL, BR)
    Tensor a = gather_channels(blocks, strided(C, 4, 0));
    Tensor b = gather_channels(blocks, strided(C, 4, 1));
    Tensor c = gather_channels(blocks, strided(C, 4, 2));
    Tensor d = gather_channels(blocks, strided(C, 4, 3));

    Tensor low = (a + b + c + d) * 0.5;
    Tensor dh = (a + b - c - d) * 0.5;
    Tensor dv = (a - b + c - d) * 0.5;
    Tensor dd = (a - b - c + d) * 0.5;
    Tensor detail = gather_channels(concat_channels(concat_channels(dh, dv), dd), interleave_perm(C, 3));

    if (!batched) {
        low = reshape(low, {C, s[2] / 2, s[3] / 2});
        detail = reshape(detail, {3 * C, s[2] / 2, s[3] / 2});
    }
    return {low, detail};
}

Tensor haar_synthesize(const Tensor& low, const Tensor& detail) {
    const bool batched = low.rank() == 4;
    if ((!batched && low.rank() != 3) || detail.rank() != low.rank())
        throw ShapeError("haar_synthesize: low and detail must both be [C,h,w] or [N,C,h,w]");
    Tensor l = batched ? low : reshape(low, {1, low.shape()[0], low.shape()[1], low.shape()[2]});
    Tensor t = batched ? detail : reshape(detail, {1, detail.shape()[0], detail.shape()[1], detail.shape()[2]});
    const Shape& sl = l.shape();
    const Shape& st = t.shape();
    if (st[0] != sl[0] || st[1] != 3 * sl[1] || st[2] != sl[2] || st[3] != sl[3])
        throw ShapeError("haar_synthesize: detail " + shape_str(detail.shape()) +
                         " inconsistent with low " + shape_str(low.shape()));
    const std::int64_t C = sl[1];

    Tensor dh = gather_channels(t, strided(C, 3, 0));
    Tensor dv = gather_channels(t, strided(C, 3, 1));
    Tensor dd = gather_channels(t, strided(C, 3, 2));

    Tensor a = (l + dh + dv + dd) * 0.5;
    Tensor b = (l + dh - dv - dd) * 0.5;
    Tensor c = (l - dh + dv - dd) * 0.5;
    Tensor d = (l - dh - dv + dd) * 0.5;

    Tensor grouped = concat_channels(concat_channels(a, b), concat_channels(c, d));
    Tensor img = unsqueeze2x2(gather_channels(grouped, interleave_perm(C, 4)));
    if (!batched) img = reshape(img, {C, sl[2] * 2, sl[3] * 2});
    return img;
}

HaarPyramid build_pyramid(const Tensor& img) {
    const bool batched = img.rank() == 4;
    if (!batched && img.rank() != 3)
        throw ShapeError("build_pyramid: expected [C,H,W] or [N,C,H,W], got " + shape_str(img.shape()));
    const std::int64_t H = img.shape()[img.rank() - 2];
    const std::int64_t W = img.shape()[img.rank() - 1];
    if (H != W || H < 1 || (H & (H - 1)) != 0)
        throw ShapeError("build_pyramid: extents must be square powers of two, got " + shape_str(img.shape()));

    HaarPyramid p;
    Tensor cur = img;
    while (cur.shape()[cur.rank() - 1] > 1) {
        HaarCoeffs coeffs = haar_analyze(cur);
        p.lows.push_back(cur);
        p.details.push_back(coeffs.detail);
        cur = coeffs.low;
    }
    p.lows.push_back(cur);
    std::reverse(p.lows.begin(), p.lows.end());
    std::reverse(p.details.begin(), p.details.end());
    return p;
}

Tensor reconstruct(const HaarPyramid& pyramid) {
    if (pyramid.lows.empty()) throw ValueError("reconstruct: empty pyramid");
    Tensor cur = pyramid.lows.front();
    for (const Tensor& d : pyramid.details) cur = haar_synthesize(cur, d);
    return cur;
}

} // namespace flowood
