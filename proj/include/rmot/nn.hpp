// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rmot/params.hpp"
#include "rmot/tensor.hpp"

namespace rmot {

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // out

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
        weight = store.add(name + ".w", {in, out});
        init_uniform_fan_in(weight, in, rng);
        if (with_bias) {
            bias = store.add(name + ".b", {out});
            init_uniform_fan_in(bias, in, rng);
        }
    }

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    std::size_t in() const { return weight.rows(); }
    std::size_t out() const { return weight.cols(); }

    void fill(double w, double b) {
        for (double& v : weight.mutable_data()) v = w;
        if (bias.defined())
            for (double& v : bias.mutable_data()) v = b;
    }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, std::size_t dim) {
        gamma = store.add(name + ".g", {dim});
        beta = store.add(name + ".b", {dim});
        for (double& v : gamma.mutable_data()) v = 1.0;
    }

    Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta); }
};

/// Stack of linear layers with ReLU between them and none after the last.
struct Mlp {
    std::vector<Linear> layers;

    Mlp() = default;
    Mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng) {
        if (widths.size() < 2) throw ContractError("mlp: need at least input and output widths");
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            layers.emplace_back(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng);
        }
    }

    Tensor operator()(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](h);
            if (i + 1 < layers.size()) h = relu(h);
        }
        return h;
    }

    Linear& last() { return layers.back(); }
};

/// The 3-layer feed-forward network used by the box branch and the box
/// refinement head.
inline Mlp make_ffn3(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                     Rng& rng) {
    return Mlp(store, name, {in, hidden, hidden, out}, rng);
}

// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention. Positional terms are added to
/// queries and keys only; values enter unencoded.
struct AttentionParams {
    Linear q, k, v, o;
    std::size_t heads = 1;

    AttentionParams() = default;
    /// `value_bias = false` drops the value and output biases so a zero
    /// value projection silences the block entirely.
    AttentionParams(ParamStore& store, const std::string& name, std::size_t dim, std::size_t n_heads, Rng& rng,
                    bool value_bias = true)
        : q(store, name + ".q", dim, dim, rng),
          k(store, name + ".k", dim, dim, rng),
          v(store, name + ".v", dim, dim, rng, value_bias),
          o(store, name + ".o", dim, dim, rng, value_bias),
          heads(n_heads) {
        if (dim % n_heads != 0) throw ContractError("attention: model dim not divisible by head count");
    }

    std::size_t dim() const { return q.in(); }
};

struct AttentionOutput {
    Tensor out;                   // m x D
    std::vector<Tensor> weights;  // per head, m x L
};

inline AttentionOutput attn_full(const AttentionParams& p, const Tensor& queries, const Tensor& keys, const Tensor& values,
                                 const Tensor& pe_q = {}, const Tensor& pe_k = {}) {
    const std::size_t d = p.dim();
    if (queries.cols() != d || keys.cols() != d || values.cols() != d) {
        throw DimensionError("attn: feature extent must equal model dim " + std::to_string(d));
    }
    if (keys.rows() != values.rows()) throw DimensionError("attn: key/value row counts differ");
    if (keys.rows() == 0) throw DimensionError("attn: no keys");
    const Tensor qin = pe_q.defined() ? add(queries, pe_q) : queries;
    const Tensor kin = pe_k.defined() ? add(keys, pe_k) : keys;
    const Tensor qp = p.q(qin);
    const Tensor kp = p.k(kin);
    const Tensor vp = p.v(values);
    const std::size_t dh = d / p.heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    AttentionOutput res;
    std::vector<Tensor> head_out;
    for (std::size_t h = 0; h < p.heads; ++h) {
        const Tensor qh = p.heads == 1 ? qp : slice_cols(qp, h * dh, (h + 1) * dh);
        const Tensor kh = p.heads == 1 ? kp : slice_cols(kp, h * dh, (h + 1) * dh);
        const Tensor vh = p.heads == 1 ? vp : slice_cols(vp, h * dh, (h + 1) * dh);
        const Tensor w = softmax(scale(matmul(qh, transpose(kh)), inv), 1);
        res.weights.push_back(w);
        head_out.push_back(matmul(w, vh));
    }
    res.out = p.o(p.heads == 1 ? head_out.front() : concat_cols(head_out));
    return res;
}

inline Tensor attn(const AttentionParams& p, const Tensor& queries, const Tensor& keys, const Tensor& values,
                   const Tensor& pe_q = {}, const Tensor& pe_k = {}) {
    return attn_full(p, queries, keys, values, pe_q, pe_k).out;
}

// ---------------------------------------------------------------------------
// Multi-scale deformable attention

struct LevelShape {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t start = 0;  // first row of this level in the flattened token matrix
};

using PyramidLayout = std::vector<LevelShape>;

inline std::size_t layout_tokens(const PyramidLayout& layout) {
    std::size_t n = 0;
    for (const auto& l : layout) n += l.h * l.w;
    return n;
}

namespace detail {

struct BilinearTap {
    std::ptrdiff_t row[4];  // token row or -1 when outside the map
    double w[4];
    double dwdx[4];
    double dwdy[4];
};

// Grid-sample convention: normalized u maps to pixel coordinate u*W - 0.5,
// so pixel centers sit at (j + 0.5) / W. Taps outside the map read zero.
inline BilinearTap bilinear_tap(const LevelShape& lv, double u, double v) {
    const double x = u * static_cast<double>(lv.w) - 0.5;
    const double y = v * static_cast<double>(lv.h) - 0.5;
    const double x0f = std::floor(x), y0f = std::floor(y);
    const double fx = x - x0f, fy = y - y0f;
    const auto x0 = static_cast<std::ptrdiff_t>(x0f), y0 = static_cast<std::ptrdiff_t>(y0f);
    BilinearTap t{};
    const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const double dx[4] = {-(1 - fy), (1 - fy), -fy, fy};
    const double dy[4] = {-(1 - fx), -fx, (1 - fx), fx};
    for (int c = 0; c < 4; ++c) {
        const bool inside = xs[c] >= 0 && ys[c] >= 0 && xs[c] < static_cast<std::ptrdiff_t>(lv.w) &&
                            ys[c] < static_cast<std::ptrdiff_t>(lv.h);
        t.row[c] = inside ? static_cast<std::ptrdiff_t>(lv.start) + ys[c] * static_cast<std::ptrdiff_t>(lv.w) + xs[c] : -1;
        t.w[c] = ws[c];
        t.dwdx[c] = dx[c] * static_cast<double>(lv.w);
        t.dwdy[c] = dy[c] * static_cast<double>(lv.h);
    }
    return t;
}

}  // namespace detail

/// Core of deformable attention: for every query, head, level and point,
/// bilinearly sample the head's slice of `value` at `loc` and accumulate it
/// with weight `weights`.
///
/// value: T x D; loc: m x (H*L*P*2) normalized (x, y) pairs;
/// weights: m x (H*L*P). Returns m x D.
inline Tensor deform_sample(const Tensor& value, const PyramidLayout& layout, const Tensor& loc, const Tensor& weights,
                            std::size_t heads, std::size_t points) {
    const std::size_t levels = layout.size();
    const std::size_t d = value.cols();
    const std::size_t m = loc.rows();
    const std::size_t per_q = heads * levels * points;
    if (value.rows() != layout_tokens(layout)) throw DimensionError("deform_sample: value rows do not match layout");
    if (loc.cols() != per_q * 2 || weights.cols() != per_q || weights.rows() != m) {
        throw DimensionError("deform_sample: sampling tensor extents do not match heads*levels*points");
    }
    if (d % heads != 0) throw DimensionError("deform_sample: dim not divisible by heads");
    const std::size_t dh = d / heads;
    std::vector<double> out(m * d, 0.0);
    const auto vd = value.data();
    const auto ld = loc.data();
    const auto wd = weights.data();
    for (std::size_t q = 0; q < m; ++q) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* o = out.data() + q * d + h * dh;
            for (std::size_t l = 0; l < levels; ++l) {
                for (std::size_t p = 0; p < points; ++p) {
                    const std::size_t s = (h * levels + l) * points + p;
                    const double a = wd[q * per_q + s];
                    const auto tap = detail::bilinear_tap(layout[l], ld[q * per_q * 2 + 2 * s], ld[q * per_q * 2 + 2 * s + 1]);
                    for (int c = 0; c < 4; ++c) {
                        if (tap.row[c] < 0) continue;
                        const double f = a * tap.w[c];
                        const double* vr = vd.data() + static_cast<std::size_t>(tap.row[c]) * d + h * dh;
                        for (std::size_t k = 0; k < dh; ++k) o[k] += f * vr[k];
                    }
                }
            }
        }
    }
    return detail::record(
        {m, d}, std::move(out), {&value, &loc, &weights},
        [vn = value.impl(), ln = loc.impl(), wn = weights.impl(), layout, heads, points, levels, d, dh, m,
         per_q](detail::Node& o) {
            for (std::size_t q = 0; q < m; ++q) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* go = o.grad.data() + q * d + h * dh;
                    for (std::size_t l = 0; l < levels; ++l) {
                        for (std::size_t p = 0; p < points; ++p) {
                            const std::size_t s = (h * levels + l) * points + p;
                            const double a = wn->data[q * per_q + s];
                            const std::size_t li = q * per_q * 2 + 2 * s;
                            const auto tap = detail::bilinear_tap(layout[l], ln->data[li], ln->data[li + 1]);
                            double dsample = 0.0, dx = 0.0, dy = 0.0;
                            for (int c = 0; c < 4; ++c) {
                                if (tap.row[c] < 0) continue;
                                const std::size_t r = static_cast<std::size_t>(tap.row[c]);
                                const double* vr = vn->data.data() + r * d + h * dh;
                                double dot = 0.0;
                                for (std::size_t k = 0; k < dh; ++k) dot += go[k] * vr[k];
                                dsample += tap.w[c] * dot;
                                dx += tap.dwdx[c] * dot;
                                dy += tap.dwdy[c] * dot;
                                if (vn->requires_grad) {
                                    double* gv = vn->grad.data() + r * d + h * dh;
                                    const double f = a * tap.w[c];
                                    for (std::size_t k = 0; k < dh; ++k) gv[k] += f * go[k];
                                }
                            }
                            if (wn->requires_grad) wn->grad[q * per_q + s] += dsample;
                            if (ln->requires_grad) {
                                ln->grad[li] += a * dx;
                                ln->grad[li + 1] += a * dy;
                            }
                        }
                    }
                }
            }
        });
}

/// MSDeformAttn parameters: value projection, the sampling-offset and
/// attention-weight predictors, and the output projection.
struct DeformAttnParams {
    Linear value;
    Linear offsets;  // D -> heads*levels*points*2
    Linear weights;  // D -> heads*levels*points
    Linear output;
    std::size_t heads = 4;
    std::size_t levels = 4;
    std::size_t points = 4;

    DeformAttnParams() = default;
    DeformAttnParams(ParamStore& store, const std::string& name, std::size_t dim, std::size_t n_heads,
                     std::size_t n_levels, std::size_t n_points, Rng& rng, bool value_bias = true)
        : value(store, name + ".value", dim, dim, rng, value_bias),
          offsets(store, name + ".offsets", dim, n_heads * n_levels * n_points * 2, rng),
          weights(store, name + ".weights", dim, n_heads * n_levels * n_points, rng),
          output(store, name + ".output", dim, dim, rng, value_bias),
          heads(n_heads),
          levels(n_levels),
          points(n_points) {
        if (dim % n_heads != 0) throw ContractError("deform attn: dim not divisible by heads");
        // Deformable-DETR start: zero predictor weights, offsets fanned out
        // radially per head, uniform attention over points.
        offsets.fill(0.0, 0.0);
        weights.fill(0.0, 0.0);
        auto b = offsets.bias.mutable_data();
        for (std::size_t h = 0; h < n_heads; ++h) {
            const double theta = 2.0 * M_PI * static_cast<double>(h) / static_cast<double>(n_heads);
            for (std::size_t l = 0; l < n_levels; ++l) {
                for (std::size_t p = 0; p < n_points; ++p) {
                    const std::size_t s = (h * n_levels + l) * n_points + p;
                    b[2 * s] = std::cos(theta) * static_cast<double>(p + 1) * 0.5;
                    b[2 * s + 1] = std::sin(theta) * static_cast<double>(p + 1) * 0.5;
                }
            }
        }
    }

    std::size_t samples_per_query() const { return heads * levels * points; }
};

struct DeformAttnOutput {
    Tensor out;       // m x D
    Tensor loc;       // m x (H*L*P*2)
    Tensor weights;   // m x (H*L*P), post-softmax
};

/// Deformable attention for queries (already carrying their positional
/// terms) around normalized reference points ref (m x 2) over the flattened
/// pyramid `value_in`. Offsets are in units of the sampled level's cells.
inline DeformAttnOutput ms_deform_attn_full(const DeformAttnParams& p, const Tensor& queries, const Tensor& ref,
                                            const Tensor& value_in, const PyramidLayout& layout) {
    if (layout.size() != p.levels) throw DimensionError("ms_deform_attn: layout level count differs from parameters");
    if (ref.rows() != queries.rows() || ref.cols() != 2) throw DimensionError("ms_deform_attn: ref must be m x 2");
    for (double v : ref.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("ms_deform_attn: reference point outside [0,1]^2");
    }
    const std::size_t m = queries.rows();
    const std::size_t s = p.samples_per_query();
    std::vector<double> cell_scale(2 * s), select(2 * 2 * s, 0.0);
    for (std::size_t h = 0; h < p.heads; ++h) {
        for (std::size_t l = 0; l < p.levels; ++l) {
            for (std::size_t k = 0; k < p.points; ++k) {
                const std::size_t i = (h * p.levels + l) * p.points + k;
                cell_scale[2 * i] = 1.0 / static_cast<double>(layout[l].w);
                cell_scale[2 * i + 1] = 1.0 / static_cast<double>(layout[l].h);
                select[2 * i] = 1.0;                  // row 0 (x) feeds even columns
                select[2 * s + 2 * i + 1] = 1.0;      // row 1 (y) feeds odd columns
            }
        }
    }
    const Tensor v = p.value(value_in);
    const Tensor off = mul(p.offsets(queries), Tensor({1, 2 * s}, cell_scale));
    const Tensor loc = add(matmul(ref, Tensor({2, 2 * s}, select)), off);
    const Tensor logits = reshape(p.weights(queries), {m * p.heads, p.levels * p.points});
    const Tensor w = reshape(softmax(logits, 1), {m, s});
    const Tensor sampled = deform_sample(v, layout, loc, w, p.heads, p.points);
    return {p.output(sampled), loc, w};
}

inline Tensor ms_deform_attn(const DeformAttnParams& p, const Tensor& queries, const Tensor& ref, const Tensor& value_in,
                             const PyramidLayout& layout) {
    return ms_deform_attn_full(p, queries, ref, value_in, layout).out;
}

// ---------------------------------------------------------------------------
// Positional encodings

/// Fixed 2-D sine/cosine code for an h x w grid, one row per cell in
/// row-major order. The first half of the channels encodes y, the second x;
/// each half interleaves sin/cos over D/4 geometric frequencies.
inline Tensor sinusoidal_pe2d(std::size_t h, std::size_t w, std::size_t dim) {
    if (dim % 4 != 0) throw ContractError("sinusoidal_pe2d: dim must be divisible by 4");
    const std::size_t bands = dim / 4;
    std::vector<double> out(h * w * dim);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const double y = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(h);
            const double x = 2.0 * M_PI * static_cast<double>(j) / static_cast<double>(w);
            double* row = out.data() + (i * w + j) * dim;
            for (std::size_t k = 0; k < bands; ++k) {
                const double freq = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(bands));
                row[2 * k] = std::sin(y * freq);
                row[2 * k + 1] = std::cos(y * freq);
                row[dim / 2 + 2 * k] = std::sin(x * freq);
                row[dim / 2 + 2 * k + 1] = std::cos(x * freq);
            }
        }
    }
    return Tensor({h * w, dim}, std::move(out));
}

/// PE^I (fixed sinusoidal), PE^S (learned word positions), PE^T (learned,
/// one slot per relative age 1..K). PE^Q lives with the decoder queries as
/// their position halves.
struct PositionalEncoders {
    Tensor word_positions;  // max_words x D
    Tensor temporal;        // K x D

    PositionalEncoders() = default;
    PositionalEncoders(ParamStore& store, std::size_t dim, std::size_t max_words, std::size_t window, Rng& rng) {
        word_positions = store.add("pe.words", {max_words, dim});
        temporal = store.add("pe.temporal", {window, dim});
        for (double& v : word_positions.mutable_data()) v = 0.1 * rng.normal();
        for (double& v : temporal.mutable_data()) v = 0.1 * rng.normal();
    }

    std::size_t window() const { return temporal.rows(); }

    Tensor words(std::size_t length) const {
        if (length > word_positions.rows()) throw ContractError("expression longer than the word position table");
        return slice_rows(word_positions, 0, length);
    }

    /// Rows of PE^T for the given ages; age 0 means "current frame" and maps
    /// to a zero code.
    Tensor ages(const std::vector<std::size_t>& ages) const {
        const std::size_t k = window();
        std::vector<std::size_t> idx;
        std::vector<double> mask(ages.size());
        for (std::size_t i = 0; i < ages.size(); ++i) {
            if (ages[i] > k) throw ContractError("temporal age beyond memory window");
            idx.push_back(ages[i] == 0 ? 0 : ages[i] - 1);
            mask[i] = ages[i] == 0 ? 0.0 : 1.0;
        }
        const Tensor rows = gather_rows(temporal, idx);
        if (std::all_of(mask.begin(), mask.end(), [](double v) { return v == 1.0; })) return rows;
        std::vector<double> full;
        full.reserve(ages.size() * temporal.cols());
        for (double m : mask) full.insert(full.end(), temporal.cols(), m);
        return mul(rows, Tensor({ages.size(), temporal.cols()}, std::move(full)));
    }
};

}  // namespace rmot
