#include "dq/dqae.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>

#include "dq/error.hpp"
#include "dq/info.hpp"
#include "dq/kernels.hpp"

namespace dq {

double bits_per_dim(double nll_nats_total, std::size_t num_dims) {
    if (num_dims == 0) throw std::invalid_argument("bits_per_dim: num_dims must be positive");
    return nll_nats_total / (static_cast<double>(num_dims) * std::log(2.0));
}

namespace {

CodeTensor bin_targets(const NdTensor& batch, std::size_t bins) {
    CodeTensor t;
    t.shape = batch.shape();
    t.data.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        double v = batch[i];
        if (v < 0.0) v = 0.0;
        long bin = static_cast<long>(v * static_cast<double>(bins));
        if (bin >= static_cast<long>(bins)) bin = static_cast<long>(bins) - 1;
        t.data[i] = static_cast<std::int32_t>(bin);
    }
    return t;
}

}  // namespace

DqaeModel::DqaeModel(const DqaeConfig& cfg) : cfg_(cfg), optimizer_(cfg.optimizer) {
    if (cfg_.num_levels == 0) throw ConfigError("DqaeModel: num_levels must be >= 1");
    if (cfg_.codebook_sizes.size() != cfg_.num_levels)
        throw ConfigError("DqaeModel: codebook_sizes must list one K per level (top to bottom)");
    for (std::size_t k : cfg_.codebook_sizes)
        if (k == 0) throw ConfigError("DqaeModel: K must be positive");
    if (cfg_.num_slices == 0 || cfg_.code_dim == 0 || cfg_.width == 0)
        throw ConfigError("DqaeModel: M, D and width must be positive");
    if (cfg_.beta < 0.0) throw ConfigError("DqaeModel: beta must be >= 0");

    std::mt19937_64 rng(cfg_.seed);
    const std::size_t w = cfg_.width;
    const std::size_t qw = cfg_.num_slices * cfg_.code_dim;
    const std::size_t top = cfg_.num_levels - 1;

    levels_.resize(cfg_.num_levels);
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        LevelBlocks& b = levels_[l];
        const std::string p = "level" + std::to_string(l) + ".";
        if (l == 0) {
            b.enc_down1 = Conv2dLayer(p + "enc_down1", cfg_.input_channels, w, 4, 2, 1, rng);
            b.enc_down2 = Conv2dLayer(p + "enc_down2", w, w, 4, 2, 1, rng);
        } else {
            b.enc_down2 = Conv2dLayer(p + "enc_down2", w, w, 4, 2, 1, rng);
        }
        b.enc_res1 = ResBlock(p + "enc_res1", w, rng);
        b.enc_res2 = ResBlock(p + "enc_res2", w, rng);
        if (l < top) b.cond_proj = Conv2dLayer(p + "cond_proj", 2 * w, w, 1, 1, 0, rng);
        b.pre_q = Conv2dLayer(p + "pre_q", w, qw, 1, 1, 0, rng);
        b.post_q = Conv2dLayer(p + "post_q", qw, w, 1, 1, 0, rng);
        b.dec_res = ResBlock(p + "dec_res", w, rng);

        const bool has_up = l < top || cfg_.num_levels == 1 ||
                            (cfg_.top_stream_to_final && l == top);
        if (has_up) {
            const std::size_t up_in = (l == top && cfg_.num_levels == 1) ? w : qw;
            b.up_proj = Conv2dLayer(p + "up_proj", up_in, w, 1, 1, 0, rng);
            for (std::size_t s = 0; s <= l; ++s)
                b.up_stages.emplace_back(p + "up" + std::to_string(s), w, w, rng);
        }
    }

    std::size_t streams = cfg_.num_levels == 1 ? 1 : cfg_.num_levels - 1;
    if (cfg_.top_stream_to_final && cfg_.num_levels > 1) ++streams;
    final_in = Conv2dLayer("final.in", streams * w, w, 3, 1, 1, rng);
    final_res = ResBlock("final.res", w, rng);
    final_up = UpsampleConv("final.up", w, w, rng);
    if (cfg_.recon == ReconLoss::Mse) {
        head1 = Conv2dLayer("final.head1", w, cfg_.input_channels, 3, 1, 1, rng);
    } else {
        head1 = Conv2dLayer("final.head1", w, w, 3, 1, 1, rng);
        head2 = Conv2dLayer("final.head2", w, 256 * cfg_.input_channels, 1, 1, 0, rng);
    }

    quantizers_.reserve(cfg_.num_levels);
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        const std::size_t k = cfg_.codebook_sizes[cfg_.num_levels - 1 - l];
        if (cfg_.shared_codebook)
            quantizers_.push_back(DepthwiseQuantizer::shared(cfg_.num_slices, 1, k, cfg_.code_dim,
                                                             cfg_.gamma, cfg_.epsilon));
        else
            quantizers_.push_back(DepthwiseQuantizer::per_slice(cfg_.num_slices, 1, k,
                                                                cfg_.code_dim, cfg_.gamma,
                                                                cfg_.epsilon));
    }
    books_ready_.assign(cfg_.num_levels, false);
}

std::vector<std::pair<std::string, NdTensor*>> DqaeModel::parameters() {
    std::vector<std::pair<std::string, NdTensor*>> out;
    for (LevelBlocks& b : levels_) {
        if (b.enc_down1.w.size() > 0) b.enc_down1.collect(out);
        b.enc_down2.collect(out);
        b.enc_res1.collect(out);
        b.enc_res2.collect(out);
        if (b.cond_proj.w.size() > 0) b.cond_proj.collect(out);
        b.pre_q.collect(out);
        b.post_q.collect(out);
        b.dec_res.collect(out);
        if (b.up_proj.w.size() > 0) {
            b.up_proj.collect(out);
            for (UpsampleConv& u : b.up_stages) u.collect(out);
        }
    }
    final_in.collect(out);
    final_res.collect(out);
    final_up.collect(out);
    head1.collect(out);
    if (head2.w.size() > 0) head2.collect(out);
    return out;
}

void DqaeModel::maybe_init_books(std::size_t level, const NdTensor& z_value) {
    if (books_ready_[level]) return;
    DepthwiseQuantizer& q = quantizers_[level];
    auto [slices, decomp] = decompose(z_value, q.axis(), q.num_slices());
    if (q.num_books() == 1 && q.num_slices() > 1) {
        // merged rows from every slice seed the shared book
        std::vector<NdTensor> mats;
        std::size_t rows = 0;
        for (const NdTensor& s : slices) {
            mats.push_back(positions_as_vectors(s, q.axis()));
            rows += mats.back().extent(0);
        }
        NdTensor merged = NdTensor::zeros({rows, q.code_dim()});
        std::size_t at = 0;
        for (const NdTensor& m : mats) {
            std::copy(m.data(), m.data() + m.size(), merged.data() + at * q.code_dim());
            at += m.extent(0);
        }
        q.book(0) = Codebook::init_from_samples(merged, q.book(0).num_codes(),
                                                cfg_.seed + level * 1000003ull, cfg_.gamma,
                                                cfg_.epsilon);
    } else {
        for (std::size_t m = 0; m < q.num_slices(); ++m) {
            NdTensor mat = positions_as_vectors(slices[m], q.axis());
            q.book(m) = Codebook::init_from_samples(mat, q.book(m).num_codes(),
                                                    cfg_.seed + level * 1000003ull + m * 7919ull,
                                                    cfg_.gamma, cfg_.epsilon);
        }
    }
    books_ready_[level] = true;
}

Var DqaeModel::quantize_level(Tape& tape, std::size_t level, Var z, const FrozenOffsets* frozen,
                              ForwardOutputs& out) {
    if (frozen) {
        const NdTensor zv = tape.value(z);
        const NdTensor& offset = frozen->offsets[level];
        if (!offset.same_shape(zv))
            throw std::invalid_argument("frozen offsets do not match the bottleneck shape");
        NdTensor zhat0 = NdTensor::zeros(zv.shape());
        // zhat at the base point; fixed target for the frozen commitment term
        for (std::size_t i = 0; i < zv.size(); ++i)
            zhat0[i] = frozen->base_z[level][i] + offset[i];
        double cb = 0.0;
        for (std::size_t i = 0; i < zv.size(); ++i) {
            const double diff = frozen->base_z[level][i] - zhat0[i];
            cb += diff * diff;
        }
        cb /= static_cast<double>(zv.size());
        Var quantized = tape.add(z, tape.constant(offset));
        Var commitment = tape.scale(tape.mse_loss(z, tape.constant(zhat0)), cfg_.beta);
        out.codebook_terms[level] = tape.constant(NdTensor::from_data_unchecked({1}, {cb}));
        out.commitment_terms[level] = commitment;
        return quantized;
    }

    maybe_init_books(level, tape.value(z));
    std::vector<Var> code_vars;
    if (!cfg_.use_ema) {
        DepthwiseQuantizer& q = quantizers_[level];
        for (std::size_t b = 0; b < q.num_books(); ++b) {
            NdTensor codes = NdTensor::from_data_unchecked(
                {q.book(b).num_codes(), q.code_dim()}, q.book(b).codes());
            Var cv = tape.param(codes);
            code_vars.push_back(cv);
            out.bound.push_back({"level" + std::to_string(level) + ".codes" + std::to_string(b),
                                 nullptr, cv});
        }
    }
    auto st = tape.straight_through_quantize(z, quantizers_[level], cfg_.beta, code_vars);
    out.codebook_terms[level] = st.codebook_term;
    out.commitment_terms[level] = st.commitment_term;
    Var quantized = st.quantized;
    out.levels[level] = std::move(st);
    return quantized;
}

DqaeModel::ForwardOutputs DqaeModel::forward(Tape& tape, const NdTensor& batch,
                                             const std::vector<std::size_t>& zero_levels,
                                             const FrozenOffsets* frozen) {
    if (batch.rank() != 4) throw std::invalid_argument("DqaeModel: batch must be [B,C,H,W]");
    if (batch.extent(1) != cfg_.input_channels)
        throw std::invalid_argument("DqaeModel: channel count mismatch");
    const std::size_t divisor = std::size_t{1} << (cfg_.num_levels + 1);
    if (batch.extent(2) % divisor != 0 || batch.extent(3) % divisor != 0)
        throw std::invalid_argument("DqaeModel: spatial extents must be divisible by 2^(N+1)");

    ForwardOutputs out;
    out.codebook_terms.resize(cfg_.num_levels);
    out.commitment_terms.resize(cfg_.num_levels);
    out.levels.resize(cfg_.num_levels);
    auto zeroed = [&](std::size_t l) {
        return std::find(zero_levels.begin(), zero_levels.end(), l) != zero_levels.end();
    };

    Var x = tape.constant(batch);

    // encoder stack, bottom to top
    std::vector<Var> e_all(cfg_.num_levels);
    Var cur = x;
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        LevelBlocks& b = levels_[l];
        if (l == 0) cur = tape.relu(b.enc_down1.forward(tape, cur, out.bound));
        cur = tape.relu(b.enc_down2.forward(tape, cur, out.bound));
        cur = b.enc_res1.forward(tape, cur, out.bound);
        cur = b.enc_res2.forward(tape, cur, out.bound);
        e_all[l] = cur;
    }

    // top level quantizes unconditioned
    const std::size_t top = cfg_.num_levels - 1;
    Var e_top = zeroed(top) ? tape.constant(NdTensor::zeros(tape.value(e_all[top]).shape()))
                            : e_all[top];
    Var z_top = levels_[top].pre_q.forward(tape, e_top, out.bound);
    Var q_top = quantize_level(tape, top, z_top, frozen, out);
    Var d = levels_[top].dec_res.forward(
        tape, levels_[top].post_q.forward(tape, q_top, out.bound), out.bound);

    // decode top-down; each step lifts the running decode to the next scale
    std::vector<Var> streams;
    for (std::size_t step = 0; step < top; ++step) {
        const std::size_t l = top - 1 - step;
        LevelBlocks& b = levels_[l];
        Var d_up = tape.upsample2_nearest(d);
        Var e_l = zeroed(l) ? tape.constant(NdTensor::zeros(tape.value(e_all[l]).shape()))
                            : e_all[l];
        Var cond = tape.relu(
            b.cond_proj.forward(tape, tape.concat_channels(e_l, d_up), out.bound));
        Var z_l = b.pre_q.forward(tape, cond, out.bound);
        Var q_l = quantize_level(tape, l, z_l, frozen, out);
        Var d_contrib = b.dec_res.forward(tape, b.post_q.forward(tape, q_l, out.bound),
                                          out.bound);
        d = tape.add(d_contrib, d_up);

        Var u = tape.relu(b.up_proj.forward(tape, q_l, out.bound));
        for (UpsampleConv& stage : b.up_stages) u = tape.relu(stage.forward(tape, u, out.bound));
        streams.push_back(u);
    }

    if (streams.empty()) {
        // single hierarchy: the decode path itself feeds the final decoder
        LevelBlocks& b = levels_[top];
        Var u = tape.relu(b.up_proj.forward(tape, d, out.bound));
        for (UpsampleConv& stage : b.up_stages) u = tape.relu(stage.forward(tape, u, out.bound));
        streams.push_back(u);
    } else if (cfg_.top_stream_to_final) {
        LevelBlocks& b = levels_[top];
        Var u = tape.relu(b.up_proj.forward(tape, q_top, out.bound));
        for (UpsampleConv& stage : b.up_stages) u = tape.relu(stage.forward(tape, u, out.bound));
        streams.push_back(u);
    }

    Var joined = streams.front();
    for (std::size_t i = 1; i < streams.size(); ++i)
        joined = tape.concat_channels(joined, streams[i]);

    Var h = tape.relu(final_in.forward(tape, joined, out.bound));
    h = final_res.forward(tape, h, out.bound);
    h = tape.relu(final_up.forward(tape, h, out.bound));

    if (cfg_.recon == ReconLoss::Mse) {
        out.x_hat = head1.forward(tape, h, out.bound);
        out.recon_loss = tape.mse_loss(out.x_hat, x);
    } else {
        Var hh = tape.relu(head1.forward(tape, h, out.bound));
        out.x_hat = head2.forward(tape, hh, out.bound);  // logits [B, 256*C, H, W]
        out.recon_loss = tape.softmax_ce_loss(out.x_hat, bin_targets(batch, 256), 256);
    }

    out.total = out.recon_loss;
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        out.total = tape.add(out.total, out.codebook_terms[l]);
        out.total = tape.add(out.total, out.commitment_terms[l]);
    }
    return out;
}

std::vector<NdTensor> DqaeModel::encode_stack(const NdTensor& batch) {
    Tape tape;
    std::vector<BoundParam> bound;
    if (batch.rank() != 4) throw std::invalid_argument("DqaeModel: batch must be [B,C,H,W]");
    const std::size_t divisor = std::size_t{1} << (cfg_.num_levels + 1);
    if (batch.extent(2) % divisor != 0 || batch.extent(3) % divisor != 0)
        throw std::invalid_argument("DqaeModel: spatial extents must be divisible by 2^(N+1)");
    std::vector<NdTensor> result;
    Var cur = tape.constant(batch);
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        LevelBlocks& b = levels_[l];
        if (l == 0) cur = tape.relu(b.enc_down1.forward(tape, cur, bound));
        cur = tape.relu(b.enc_down2.forward(tape, cur, bound));
        cur = b.enc_res1.forward(tape, cur, bound);
        cur = b.enc_res2.forward(tape, cur, bound);
        result.push_back(tape.value(cur));
    }
    return result;
}

TrainMetrics DqaeModel::train_step(const NdTensor& batch) {
    Tape tape;
    ForwardOutputs out = forward(tape, batch, {}, nullptr);

    TrainMetrics metrics;
    metrics.step = ++step_;
    metrics.reconstruction = tape.value(out.recon_loss)[0];
    metrics.total = tape.value(out.total)[0];
    if (std::isnan(metrics.reconstruction))
        throw std::runtime_error("train_step: NaN loss in term 'reconstruction' at step " +
                                 std::to_string(step_));
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        const double cb = tape.value(out.codebook_terms[l])[0];
        const double cm = tape.value(out.commitment_terms[l])[0];
        if (std::isnan(cb))
            throw std::runtime_error("train_step: NaN loss in term 'level" + std::to_string(l) +
                                     ".codebook' at step " + std::to_string(step_));
        if (std::isnan(cm))
            throw std::runtime_error("train_step: NaN loss in term 'level" + std::to_string(l) +
                                     ".commitment' at step " + std::to_string(step_));
        metrics.codebook_terms.push_back(cb);
        metrics.commitment_terms.push_back(cm);
    }

    tape.backward(out.total);

    // parameter update; codebook params (non-EMA mode) live on the tape only
    std::vector<BoundParam> net_params;
    std::vector<BoundParam> code_params;
    for (BoundParam& p : out.bound)
        (p.tensor ? net_params : code_params).push_back(p);
    optimizer_.step(net_params, tape);
    if (!cfg_.use_ema) {
        // gradient step on the codes, then write them back into the books
        for (BoundParam& p : code_params) {
            // name: level<L>.codes<B>
            const std::string& n = p.name;
            const std::size_t lpos = n.find("level") + 5;
            const std::size_t cpos = n.find(".codes");
            const std::size_t level = std::stoul(n.substr(lpos, cpos - lpos));
            const std::size_t book = std::stoul(n.substr(cpos + 6));
            NdTensor codes = tape.value(p.var);
            NdTensor g = tape.grad(p.var);
            for (std::size_t i = 0; i < codes.size(); ++i) {
                if (std::isnan(g[i]))
                    throw std::runtime_error("train_step: NaN gradient for '" + n + "'");
                codes[i] -= cfg_.optimizer.lr * g[i];
            }
            quantizers_[level].book(book).codes() = codes.storage();
        }
    }

    // EMA codebook updates and periodic dead-code checks
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        const auto& st = out.levels[l];
        if (cfg_.use_ema) ema_update_from_detail(quantizers_[l], st.detail);
        if (cfg_.dead_check_interval > 0 && step_ % cfg_.dead_check_interval == 0)
            metrics.dead_codes_reinitialized += reinit_dead_codes_from_detail(
                quantizers_[l], st.detail, cfg_.dead_code_fraction,
                cfg_.seed + 0x9e3779b9ull * step_ + l);
    }

    // usage metrics
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        const auto& st = out.levels[l];
        const DepthwiseQuantizer& q = quantizers_[l];
        const std::size_t k = q.book(0).num_codes();
        double h_acc = 0.0;
        std::vector<std::uint64_t> usage(k, 0);
        if (q.num_books() == 1) {
            UsageHistogram h(k);
            for (const auto& codes : st.detail.slice_codes) h.add_all(codes);
            usage = h.counts;
            h_acc = entropy_nats(h);
        } else {
            for (std::size_t m = 0; m < q.num_books(); ++m) {
                UsageHistogram h(k);
                h.add_all(st.detail.slice_codes[m]);
                for (std::size_t i = 0; i < k; ++i) usage[i] += h.counts[i];
                h_acc += entropy_nats(h);
            }
            h_acc /= static_cast<double>(q.num_books());
        }
        metrics.level_entropy.push_back(h_acc);
        metrics.level_usage.push_back(std::move(usage));
    }

    for (std::size_t l = 0; l < cfg_.num_levels; ++l)
        metrics.capacity_nats +=
            capacity(cfg_.codebook_sizes[cfg_.num_levels - 1 - l], cfg_.num_slices).capacity_nats;

    if (cfg_.recon == ReconLoss::Ce256)
        metrics.bits_per_dim = metrics.reconstruction / std::log(2.0);
    return metrics;
}

DqaeModel::EvalResult DqaeModel::evaluate(const NdTensor& batch,
                                          const std::vector<std::size_t>& zero_levels) {
    Tape tape;
    ForwardOutputs out = forward(tape, batch, zero_levels, nullptr);

    EvalResult r;
    r.recon_loss = tape.value(out.recon_loss)[0];
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        r.codebook_terms.push_back(tape.value(out.codebook_terms[l])[0]);
        r.commitment_terms.push_back(tape.value(out.commitment_terms[l])[0]);
        r.level_codes.push_back(out.levels[l].result.codes);
    }

    if (cfg_.recon == ReconLoss::Mse) {
        r.reconstruction = tape.value(out.x_hat);
        r.mse = r.recon_loss;
    } else {
        // decode the argmax bin midpoint per element
        const NdTensor& logits = tape.value(out.x_hat);
        const std::size_t batch_n = batch.extent(0), ch = batch.extent(1);
        const std::size_t hw = batch.extent(2) * batch.extent(3);
        r.reconstruction = NdTensor::zeros(batch.shape());
        for (std::size_t b = 0; b < batch_n; ++b)
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t p = 0; p < hw; ++p) {
                    std::size_t best = 0;
                    double best_v = logits[((b * ch + c) * 256) * hw + p];
                    for (std::size_t k = 1; k < 256; ++k) {
                        const double v = logits[((b * ch + c) * 256 + k) * hw + p];
                        if (v > best_v) {
                            best_v = v;
                            best = k;
                        }
                    }
                    r.reconstruction[(b * ch + c) * hw + p] =
                        (static_cast<double>(best) + 0.5) / 256.0;
                }
        r.bits_per_dim = r.recon_loss / std::log(2.0);
        double acc = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const double diff = batch[i] - r.reconstruction[i];
            acc += diff * diff;
        }
        r.mse = acc / static_cast<double>(batch.size());
    }
    return r;
}

DqaeModel::FrozenOffsets DqaeModel::capture_offsets(const NdTensor& batch) {
    Tape tape;
    ForwardOutputs out = forward(tape, batch, {}, nullptr);
    FrozenOffsets f;
    f.offsets.resize(cfg_.num_levels);
    f.base_z.resize(cfg_.num_levels);
    for (std::size_t level = 0; level < cfg_.num_levels; ++level) {
        const auto& st = out.levels[level];
        const NdTensor& zhat = st.result.quantized;
        NdTensor z = reassemble_from_detail(st.detail);
        NdTensor offset = NdTensor::zeros(z.shape());
        for (std::size_t j = 0; j < z.size(); ++j) offset[j] = zhat[j] - z[j];
        f.offsets[level] = std::move(offset);
        f.base_z[level] = std::move(z);
    }
    return f;
}

double DqaeModel::frozen_loss(const NdTensor& batch, const FrozenOffsets& offsets) {
    Tape tape;
    ForwardOutputs out = forward(tape, batch, {}, &offsets);
    return tape.value(out.total)[0];
}

std::vector<std::pair<std::string, NdTensor>> DqaeModel::frozen_loss_gradients(
    const NdTensor& batch, const FrozenOffsets& offsets) {
    Tape tape;
    ForwardOutputs out = forward(tape, batch, {}, &offsets);
    tape.backward(out.total);
    std::vector<std::pair<std::string, NdTensor>> grads;
    for (const BoundParam& p : out.bound) grads.emplace_back(p.name, tape.grad(p.var));
    return grads;
}

void DqaeModel::save_checkpoint(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    std::vector<std::pair<std::string, const NdTensor*>> records;
    auto params = const_cast<DqaeModel*>(this)->parameters();
    records.reserve(params.size());
    for (auto& [name, tensor] : params) records.emplace_back(name, tensor);
    save_dqp1(records, dir + "/params.dqp1");
    for (std::size_t l = 0; l < cfg_.num_levels; ++l)
        save_dqc1(quantizers_[l], dir + "/level" + std::to_string(l) + ".dqc1");
}

void DqaeModel::load_checkpoint(const std::string& dir) {
    auto records = load_dqp1(dir + "/params.dqp1");
    auto params = parameters();
    if (records.size() != params.size())
        throw IoError("load_checkpoint: parameter count mismatch in " + dir);
    std::map<std::string, NdTensor*> by_name;
    for (auto& [name, tensor] : params) by_name[name] = tensor;
    for (auto& [name, tensor] : records) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw IoError("load_checkpoint: unknown parameter '" + name + "' in " + dir);
        if (it->second->shape() != tensor.shape())
            throw IoError("load_checkpoint: shape mismatch for '" + name + "' in " + dir);
        *it->second = std::move(tensor);
    }
    for (std::size_t l = 0; l < cfg_.num_levels; ++l) {
        quantizers_[l] = load_dqc1(dir + "/level" + std::to_string(l) + ".dqc1",
                                   cfg_.num_slices, 1, cfg_.gamma, cfg_.epsilon);
        books_ready_[l] = true;
    }
}

}  // namespace dq
