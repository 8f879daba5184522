// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rmot/params.hpp"

namespace rmot {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    /// Global gradient-norm clip; 0 disables.
    double clip_norm = 0.1;
};

/// Decoupled-weight-decay Adam over the trainable entries of a ParamStore.
class AdamW {
public:
    AdamW(ParamStore& store, AdamWConfig cfg) : cfg_(cfg) {
        for (const auto& e : store.entries()) {
            if (!e.trainable) continue;
            names_.push_back(e.name);
            params_.push_back(e.tensor);
            m_.emplace_back(e.tensor.numel(), 0.0);
            v_.emplace_back(e.tensor.numel(), 0.0);
        }
    }

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    long steps() const { return t_; }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& p : params_)
            for (double g : p.grad()) s += g * g;
        return std::sqrt(s);
    }

    /// Applies one update from the accumulated gradients; returns the
    /// pre-clip gradient norm.
    double step() {
        const double norm = grad_norm();
        const double k = cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto w = params_[i].mutable_data();
            const auto g = params_[i].grad();
            if (g.empty()) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j] * k;
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                w[j] -= cfg_.lr * cfg_.weight_decay * w[j];
                w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
            }
        }
        return norm;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    TensorMap to_map(const std::string& prefix = "adam.") const {
        TensorMap out;
        out.emplace(prefix + "t", Tensor::scalar(static_cast<double>(t_)));
        out.emplace(prefix + "lr", Tensor::scalar(cfg_.lr));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.emplace(prefix + "m." + names_[i], Tensor({m_[i].size()}, m_[i]));
            out.emplace(prefix + "v." + names_[i], Tensor({v_[i].size()}, v_[i]));
        }
        return out;
    }

    void load_map(const TensorMap& map, const std::string& prefix = "adam.") {
        auto get = [&](const std::string& k) -> const Tensor& {
            auto it = map.find(prefix + k);
            if (it == map.end()) throw CheckpointError("checkpoint: missing optimizer entry " + k);
            return it->second;
        };
        t_ = static_cast<long>(get("t").item());
        cfg_.lr = get("lr").item();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const Tensor& m = get("m." + names_[i]);
            const Tensor& v = get("v." + names_[i]);
            if (m.numel() != m_[i].size() || v.numel() != v_[i].size()) {
                throw CheckpointError("checkpoint: optimizer state size mismatch for " + names_[i]);
            }
            m_[i].assign(m.data().begin(), m.data().end());
            v_[i].assign(v.data().begin(), v.data().end());
        }
    }

private:
    AdamWConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace rmot
