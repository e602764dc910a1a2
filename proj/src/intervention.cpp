#include "crft/intervention.hpp"

#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

#include "crft/ops.hpp"

namespace crft {

InterventionBlock& InterventionParams::block(int layer, int group) {
    auto it = blocks_.find({layer, group});
    if (it == blocks_.end()) {
        throw std::out_of_range("no intervention parameters for layer " + std::to_string(layer) +
                                " group " + std::to_string(group));
    }
    return it->second;
}

const InterventionBlock& InterventionParams::block(int layer, int group) const {
    return const_cast<InterventionParams*>(this)->block(layer, group);
}

void InterventionParams::insert(int layer, int group, InterventionBlock block) {
    if (block.R.shape() != Shape{rank_, d_} || block.W.shape() != Shape{rank_, d_} ||
        block.b.shape() != Shape{rank_}) {
        throw ShapeError("intervention block shapes do not match rank " + std::to_string(rank_) +
                         " and width " + std::to_string(d_));
    }
    blocks_[{layer, group}] = std::move(block);
}

std::size_t InterventionParams::groups_in_layer(int layer) const {
    std::size_t count = 0;
    for (const auto& [key, _] : blocks_) count += key.layer == layer;
    return count;
}

std::size_t InterventionParams::trainable_count() const {
    const std::size_t per_block = rank_ * d_ + rank_ + (train_R_ ? rank_ * d_ : 0);
    return per_block * blocks_.size();
}

bool InterventionParams::identical(const InterventionParams& other) const {
    if (d_ != other.d_ || rank_ != other.rank_ || train_R_ != other.train_R_ ||
        blocks_.size() != other.blocks_.size()) {
        return false;
    }
    for (const auto& [key, block] : blocks_) {
        auto it = other.blocks_.find(key);
        if (it == other.blocks_.end()) return false;
        if (!block.R.identical(it->second.R) || !block.W.identical(it->second.W) ||
            !block.b.identical(it->second.b)) {
            return false;
        }
    }
    return true;
}

InterventionParams init_params(std::size_t d, std::size_t rank, int layer_first, int layer_last,
                               int groups, std::uint64_t seed, bool train_R) {
    if (rank > d) {
        throw std::invalid_argument("intervention rank " + std::to_string(rank) +
                                    " exceeds model width " + std::to_string(d));
    }
    if (rank == 0) throw std::invalid_argument("intervention rank must be positive");
    InterventionParams params(d, rank, train_R);
    for (int layer = layer_first; layer <= layer_last; ++layer) {
        for (int group = 0; group < groups; ++group) {
            Rng rng(Rng::derive(seed, {static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(group)}));
            Tensor gauss({rank, d});
            for (double& v : gauss.values()) v = rng.normal();
            InterventionBlock block;
            block.R = orthonormalize(gauss);
            block.W = Tensor({rank, d});
            for (double& v : block.W.values()) v = 1e-3 * rng.normal();
            block.b = Tensor({rank}, 0.0);
            params.insert(layer, group, std::move(block));
        }
    }
    return params;
}

Tensor orthonormalize(const Tensor& rows) {
    if (rows.rank() != 2) throw ShapeError("orthonormalize expects a matrix");
    const std::size_t r = rows.rows();
    const std::size_t d = rows.cols();
    if (r > d) {
        throw std::domain_error("cannot orthonormalize " + std::to_string(r) + " rows in dimension " +
                                std::to_string(d));
    }
    Tensor q = rows;
    q.requires_grad = false;
    for (std::size_t i = 0; i < r; ++i) {
        auto qi = q.row(i);
        double original = 0.0;
        for (double v : qi) original += v * v;
        original = std::sqrt(original);
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < i; ++j) {
                auto qj = q.row(j);
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += qi[c] * qj[c];
                for (std::size_t c = 0; c < d; ++c) qi[c] -= dot * qj[c];
            }
        }
        double norm = 0.0;
        for (double v : qi) norm += v * v;
        norm = std::sqrt(norm);
        if (!(norm > 1e-10 * original) || norm == 0.0) {
            throw std::domain_error("rows are rank deficient at row " + std::to_string(i));
        }
        for (double& v : qi) v /= norm;
    }
    return q;
}

double orthonormality_error(const Tensor& R) {
    double worst = 0.0;
    for (std::size_t i = 0; i < R.rows(); ++i) {
        for (std::size_t j = 0; j < R.rows(); ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < R.cols(); ++c) dot += R(i, c) * R(j, c);
            worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

std::vector<double> apply(std::span<const double> h, const InterventionBlock& block) {
    const std::size_t r = block.R.rows();
    const std::size_t d = block.R.cols();
    if (h.size() != d || block.W.shape() != block.R.shape() || block.b.size() != r) {
        throw ShapeError("intervention apply: vector of length " + std::to_string(h.size()) +
                         " against parameters of width " + std::to_string(d));
    }
    std::vector<double> coeff(r);
    for (std::size_t k = 0; k < r; ++k) {
        double wh = 0.0;
        double rh = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            wh += block.W(k, c) * h[c];
            rh += block.R(k, c) * h[c];
        }
        coeff[k] = (wh + block.b[k]) - rh;
    }
    std::vector<double> out(h.begin(), h.end());
    for (std::size_t c = 0; c < d; ++c) {
        double delta = 0.0;
        for (std::size_t k = 0; k < r; ++k) delta += block.R(k, c) * coeff[k];
        out[c] += delta;
    }
    return out;
}

std::uint64_t param_count(const CrftConfig& cfg, std::uint64_t d, std::uint64_t layers_intervened) {
    const std::uint64_t r = static_cast<std::uint64_t>(cfg.rank);
    const std::uint64_t per_block = r * d + r + (cfg.train_R ? r * d : 0);
    return layers_intervened * static_cast<std::uint64_t>(cfg.group_count()) * per_block;
}

BoundInterventions bind(Tape& tape, const InterventionParams& params, bool trainable) {
    BoundInterventions out;
    for (const auto& [key, block] : params.blocks()) {
        BoundBlock b;
        b.R = tape.param(block.R, trainable && params.train_R());
        b.W = tape.param(block.W, trainable);
        b.b = tape.param(block.b, trainable);
        out.blocks[key] = b;
    }
    return out;
}

Var apply_on_tape(Tape& tape, Var hidden, const LayerSites& sites, const BoundInterventions& bound,
                  const SourceDropout* dropout) {
    std::set<int> groups;
    for (std::size_t k = 0; k < sites.positions.size(); ++k) {
        if (sites.positions[k] == kSentinel) continue;
        groups.insert(sites.groups.empty() ? 0 : sites.groups[k]);
    }
    Var out = hidden;
    for (int group : groups) {
        std::vector<int> rows;
        for (std::size_t k = 0; k < sites.positions.size(); ++k) {
            if (sites.positions[k] == kSentinel) continue;
            const int g = sites.groups.empty() ? 0 : sites.groups[k];
            if (g == group) rows.push_back(sites.positions[k]);
        }
        auto it = bound.blocks.find({sites.layer, group});
        if (it == bound.blocks.end()) {
            throw std::out_of_range("no intervention parameters bound for layer " +
                                    std::to_string(sites.layer) + " group " + std::to_string(group));
        }
        const BoundBlock& blk = it->second;
        Var h = ops::gather_rows(tape, out, rows);
        Var source = ops::add_row(tape, ops::matmul_nt(tape, h, blk.W), blk.b);
        if (dropout != nullptr && dropout->rate > 0.0) {
            const Tensor& sv = tape.value(source);
            Tensor mask(sv.shape());
            const double keep = 1.0 - dropout->rate;
            for (double& m : mask.values()) m = dropout->rng->uniform() < keep ? 1.0 / keep : 0.0;
            source = ops::mul(tape, source, tape.leaf(std::move(mask)));
        }
        Var projected = ops::matmul_nt(tape, h, blk.R);
        Var delta = ops::matmul(tape, ops::sub(tape, source, projected), blk.R);
        out = ops::scatter_add_rows(tape, out, rows, delta);
    }
    return out;
}

}  // namespace crft
