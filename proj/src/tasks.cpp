#include "modprec/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "modprec/rng.hpp"

namespace modprec::tasks {

void ModalityTaskSpec::validate() const {
    if (mixing < 0.0 || mixing > 1.0) throw ConfigError("task: mixing must be in [0, 1]");
    if (kind == TaskKind::quadratic_pair) {
        if (dim < 1) throw ConfigError("task: dim must be >= 1");
        if (h_cond < 1.0) throw ConfigError("task: h_cond must be >= 1");
        if (!(h_scale > 0.0)) throw ConfigError("task: h_scale must be positive");
        if (cov_scale_text < 0.0) throw ConfigError("task: cov_scale_text must be >= 0");
        if (cov_ratio < 0.0) throw ConfigError("task: cov_ratio must be >= 0");
    } else {
        if (vocab_img < 2 || vocab_text < 2) throw ConfigError("task: vocab sizes must be >= 2");
        if (embed_dim < 1) throw ConfigError("task: embed_dim must be >= 1");
        if (seq_len < 2) throw ConfigError("task: seq_len must be >= 2");
        if (!(zipf_exponent > 0.0)) throw ConfigError("task: zipf_exponent must be positive");
        const int topics = std::max(1, std::min(text_classes, vocab_text));
        if (vocab_text % topics != 0) {
            throw ConfigError("task: vocab_text must be divisible by text_classes");
        }
        if (img_bigram_mix < 0.0 || img_bigram_mix > 1.0) {
            throw ConfigError("task: img_bigram_mix must be in [0, 1]");
        }
    }
}

double total_loss(const LossGrad& lg) {
    const long n = lg.n_image + lg.n_text;
    if (n == 0) return 0.0;
    return (lg.loss_image * static_cast<double>(lg.n_image) +
            lg.loss_text * static_cast<double>(lg.n_text)) /
           static_cast<double>(n);
}

TaskInstance::TaskInstance(const ModalityTaskSpec& spec) : spec_(spec) {
    spec_.validate();
    if (spec_.kind == TaskKind::quadratic_pair) {
        const int d = spec_.dim;
        // Shared SPD curvature with log-spaced spectrum and a random basis.
        Rng rng(stream_seed(spec_.seed, rng_tag::task_shape));
        Mat gauss(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) gauss(i, j) = rng.normal();
        Eigen::HouseholderQR<Mat> qr(gauss);
        Mat q = qr.householderQ();
        Vec lams(d);
        for (int i = 0; i < d; ++i) {
            const double t = d > 1 ? static_cast<double>(i) / static_cast<double>(d - 1) : 0.0;
            lams[i] = spec_.h_scale * std::pow(1.0 / spec_.h_cond, 1.0 - t);
        }
        h_ = q * lams.asDiagonal() * q.transpose();
        h_ = 0.5 * (h_ + h_.transpose());
        c_sqrt_img_ = std::sqrt(spec_.cov_scale_text * spec_.cov_ratio) * Mat::Identity(d, d);
        c_sqrt_text_ = std::sqrt(spec_.cov_scale_text) * Mat::Identity(d, d);
    } else {
        // Zipf CDF within a text class (over the whole text vocabulary when
        // classes are disabled), and the fixed class-transition permutation.
        const int classes = std::max(1, std::min(spec_.text_classes, spec_.vocab_text));
        class_size_ = spec_.vocab_text / classes;
        zipf_cdf_.resize(class_size_);
        double norm = 0.0;
        for (int k = 0; k < class_size_; ++k)
            norm += std::pow(static_cast<double>(k + 1), -spec_.zipf_exponent);
        double acc = 0.0;
        for (int k = 0; k < class_size_; ++k) {
            acc += std::pow(static_cast<double>(k + 1), -spec_.zipf_exponent) / norm;
            zipf_cdf_[k] = acc;
        }
        zipf_cdf_.back() = 1.0;
        topic_cdf_.resize(classes);
        double topic_norm = 0.0;
        for (int c = 0; c < classes; ++c)
            topic_norm += std::pow(static_cast<double>(c + 1), -spec_.zipf_exponent);
        double topic_acc = 0.0;
        for (int c = 0; c < classes; ++c) {
            topic_acc += std::pow(static_cast<double>(c + 1), -spec_.zipf_exponent) / topic_norm;
            topic_cdf_[c] = topic_acc;
        }
        topic_cdf_.back() = 1.0;
        const int img_classes = std::max(1, std::min(spec_.img_classes, spec_.vocab_img));
        img_class_size_ = spec_.vocab_img / img_classes;
        img_next_.resize(img_classes);
        for (int t = 0; t < img_classes; ++t) img_next_[t] = t;
        Rng img_rng(stream_seed(spec_.seed, rng_tag::task_shape, 2));
        for (int t = img_classes - 1; t > 0; --t) {
            std::swap(img_next_[t], img_next_[img_rng.uniform_int(t + 1)]);
        }
    }
}

Vec TaskInstance::modality_mean(Modality m) const {
    const double mu = m == Modality::image ? spec_.mu_img : spec_.mu_text;
    return mu * Vec::Ones(spec_.dim);
}

ParamSet TaskInstance::init_params() const {
    Rng rng(stream_seed(spec_.seed, rng_tag::param_init));
    ParamSet params;
    if (spec_.kind == TaskKind::quadratic_pair) {
        Mat theta(spec_.dim, 1);
        for (int i = 0; i < spec_.dim; ++i) theta(i, 0) = spec_.init_scale * rng.normal();
        params.push_back({"theta", std::move(theta)});
    } else {
        Mat embed(spec_.vocab_total(), spec_.embed_dim);
        for (Eigen::Index i = 0; i < embed.rows(); ++i)
            for (Eigen::Index j = 0; j < embed.cols(); ++j)
                embed(i, j) = spec_.embed_init_scale * rng.normal();
        params.push_back({"embed", std::move(embed)});
        // dense map between the context embedding and the tied softmax
        params.push_back({"mix", Mat::Identity(spec_.embed_dim, spec_.embed_dim)});
    }
    return params;
}

namespace {

int sample_zipf(const std::vector<double>& cdf, Rng& rng) {
    const double u = rng.uniform01();
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return static_cast<int>(std::distance(cdf.begin(), it));
}

} // namespace

MicroBatch TaskInstance::sample_micro_batch(long step, long micro_in_step, int size) const {
    if (size < 1) throw ValidationError("sample_micro_batch: size must be >= 1");
    Rng rng(stream_seed(spec_.seed, rng_tag::micro_batch, static_cast<std::uint64_t>(step),
                        static_cast<std::uint64_t>(micro_in_step)));
    MicroBatch batch;
    batch.size = size;
    switch (spec_.routing) {
    case Routing::sample:
        batch.modality = Modality::mixed;
        break;
    case Routing::step: {
        Rng modality_rng(stream_seed(spec_.seed, rng_tag::modality,
                                     static_cast<std::uint64_t>(step)));
        batch.modality = modality_rng.bernoulli(spec_.mixing) ? Modality::image : Modality::text;
        break;
    }
    case Routing::micro: {
        Rng modality_rng(stream_seed(spec_.seed, rng_tag::modality,
                                     static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(micro_in_step) + 1));
        batch.modality = modality_rng.bernoulli(spec_.mixing) ? Modality::image : Modality::text;
        break;
    }
    case Routing::half: {
        const long block = std::max(1, spec_.route_block);
        Rng modality_rng(stream_seed(spec_.seed, rng_tag::modality,
                                     static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(micro_in_step / block) + 1));
        batch.modality = modality_rng.bernoulli(spec_.mixing) ? Modality::image : Modality::text;
        break;
    }
    }
    batch.sample_modality.resize(size);
    for (int s = 0; s < size; ++s) {
        batch.sample_modality[s] =
            batch.modality == Modality::mixed
                ? (rng.bernoulli(spec_.mixing) ? Modality::image : Modality::text)
                : batch.modality;
    }
    if (spec_.kind == TaskKind::quadratic_pair) {
        batch.real_samples.resize(spec_.dim, size);
        for (int s = 0; s < size; ++s) {
            const bool img = batch.sample_modality[s] == Modality::image;
            const Mat& c_sqrt = img ? c_sqrt_img_ : c_sqrt_text_;
            Vec xi(spec_.dim);
            for (int i = 0; i < spec_.dim; ++i) xi[i] = rng.normal();
            batch.real_samples.col(s) = modality_mean(batch.sample_modality[s]) + c_sqrt * xi;
        }
    } else {
        batch.token_seqs.resize(size);
        for (int s = 0; s < size; ++s) {
            const bool img = batch.sample_modality[s] == Modality::image;
            auto& seq = batch.token_seqs[s];
            seq.resize(spec_.seq_len);
            if (img) {
                seq[0] = rng.uniform_int(spec_.vocab_img);
                for (int t = 1; t < spec_.seq_len; ++t) {
                    if (rng.bernoulli(spec_.img_bigram_mix)) {
                        const int next_class = img_next_[seq[t - 1] / img_class_size_];
                        seq[t] = next_class * img_class_size_ + rng.uniform_int(img_class_size_);
                    } else {
                        seq[t] = rng.uniform_int(spec_.vocab_img);
                    }
                }
            } else {
                const int topic = sample_zipf(topic_cdf_, rng);
                for (int t = 0; t < spec_.seq_len; ++t) {
                    seq[t] = spec_.vocab_img + topic * class_size_ + sample_zipf(zipf_cdf_, rng);
                }
            }
        }
    }
    return batch;
}

LossGrad TaskInstance::loss_and_grad(const ParamSet& params, const MicroBatch& batch) const {
    if (batch.size < 1) throw ValidationError("loss_and_grad: empty micro-batch");
    return spec_.kind == TaskKind::quadratic_pair ? quadratic_loss_grad(params, batch)
                                                  : token_loss_grad(params, batch);
}

LossGrad TaskInstance::quadratic_loss_grad(const ParamSet& params, const MicroBatch& batch) const {
    if (params.size() != 1 || params[0].value.rows() != spec_.dim || params[0].value.cols() != 1) {
        throw ValidationError("quadratic task expects a single dim x 1 parameter");
    }
    const Vec theta = params[0].value.col(0);
    LossGrad out;
    Vec grad = Vec::Zero(spec_.dim);
    for (int s = 0; s < batch.size; ++s) {
        const Vec err = theta - batch.real_samples.col(s);
        const Vec h_err = h_ * err;
        const double loss = 0.5 * err.dot(h_err);
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "quadratic task: non-finite loss at sample " << s;
            throw TaskError(os.str());
        }
        grad += h_err;
        if (batch.sample_modality[s] == Modality::image) {
            out.loss_image += loss;
            out.n_image += 1;
        } else {
            out.loss_text += loss;
            out.n_text += 1;
        }
    }
    if (out.n_image > 0) out.loss_image /= static_cast<double>(out.n_image);
    if (out.n_text > 0) out.loss_text /= static_cast<double>(out.n_text);
    grad /= static_cast<double>(batch.size);
    out.grad.push_back({"theta", grad});
    return out;
}

LossGrad TaskInstance::token_loss_grad(const ParamSet& params, const MicroBatch& batch) const {
    if (params.size() != 2 || params[0].value.rows() != spec_.vocab_total() ||
        params[0].value.cols() != spec_.embed_dim ||
        params[1].value.rows() != spec_.embed_dim ||
        params[1].value.cols() != spec_.embed_dim) {
        throw ValidationError(
            "token task expects a vocab x embed_dim embedding and an embed_dim x embed_dim map");
    }
    const Mat& embed = params[0].value;
    const Mat& mix = params[1].value;
    const int vocab = spec_.vocab_total();
    const int preds_per_seq = spec_.seq_len - 1;
    const int n = batch.size * preds_per_seq;

    std::vector<int> ctx(n), target(n);
    for (int s = 0; s < batch.size; ++s) {
        const auto& seq = batch.token_seqs[s];
        for (int t = 0; t + 1 < spec_.seq_len; ++t) {
            const int i = s * preds_per_seq + t;
            ctx[i] = seq[t];
            target[i] = seq[t + 1];
            if (ctx[i] < 0 || ctx[i] >= vocab || target[i] < 0 || target[i] >= vocab) {
                throw ValidationError("token task: token id out of range");
            }
        }
    }

    // Context embeddings, one column per prediction.
    Mat h(spec_.embed_dim, n);
    for (int i = 0; i < n; ++i) h.col(i) = embed.row(ctx[i]).transpose();
    const Mat u = mix * h;       // mapped contexts
    Mat logits = embed * u;      // vocab x n

    // Softmax, loss, and logit gradients in place, whole-matrix so the exp
    // vectorizes. Each prediction carries weight 1 / (batch * preds) so the
    // batch loss is the mean per-sequence loss.
    const double w = 1.0 / static_cast<double>(batch.size * preds_per_seq);
    LossGrad out;
    const Eigen::RowVectorXd col_max = logits.colwise().maxCoeff();
    Vec target_logit(n);
    for (int i = 0; i < n; ++i) target_logit[i] = logits(target[i], i);
    logits = ((logits.rowwise() - col_max).array().exp()).matrix();
    const Eigen::RowVectorXd col_sum = logits.colwise().sum();
    std::vector<double> seq_loss(batch.size, 0.0);
    for (int i = 0; i < n; ++i) {
        const double loss_i = -(target_logit[i] - col_max[i] - std::log(col_sum[i]));
        if (!std::isfinite(loss_i)) {
            std::ostringstream os;
            os << "token task: non-finite loss at prediction " << i << " (sequence "
               << i / preds_per_seq << ")";
            throw TaskError(os.str());
        }
        seq_loss[i / preds_per_seq] += loss_i / static_cast<double>(preds_per_seq);
    }
    logits.array().rowwise() *= (w / col_sum.array());
    for (int i = 0; i < n; ++i) logits(target[i], i) -= w;
    for (int s = 0; s < batch.size; ++s) {
        if (batch.sample_modality[s] == Modality::image) {
            out.loss_image += seq_loss[s];
            out.n_image += 1;
        } else {
            out.loss_text += seq_loss[s];
            out.n_text += 1;
        }
    }
    if (out.n_image > 0) out.loss_image /= static_cast<double>(out.n_image);
    if (out.n_text > 0) out.loss_text /= static_cast<double>(out.n_text);

    // Tied embedding: output-projection term plus the scatter of the context
    // embedding gradient through the dense map.
    Mat grad = logits * u.transpose();          // vocab x embed_dim
    const Mat du = embed.transpose() * logits;  // embed_dim x n
    Mat grad_mix = du * h.transpose();          // embed_dim x embed_dim
    const Mat dh = mix.transpose() * du;        // embed_dim x n
    for (int i = 0; i < n; ++i) grad.row(ctx[i]) += dh.col(i).transpose();

    out.grad.push_back({"embed", std::move(grad)});
    out.grad.push_back({"mix", std::move(grad_mix)});
    return out;
}

std::pair<double, double> covariance_trace_estimate(const std::vector<Vec>& img_grads,
                                                    const std::vector<Vec>& text_grads) {
    auto group_trace = [](const std::vector<Vec>& grads, const char* label) {
        if (grads.size() < 2) {
            std::ostringstream os;
            os << "covariance_trace_estimate: need >= 2 " << label << " micro-gradients, got "
               << grads.size();
            throw ValidationError(os.str());
        }
        const Eigen::Index d = grads.front().size();
        Vec mean = Vec::Zero(d);
        for (const Vec& g : grads) {
            if (g.size() != d) throw ValidationError("covariance_trace_estimate: mixed dimensions");
            mean += g;
        }
        mean /= static_cast<double>(grads.size());
        double acc = 0.0;
        for (const Vec& g : grads) acc += (g - mean).squaredNorm();
        return acc / static_cast<double>(grads.size() - 1);
    };
    return {group_trace(img_grads, "image"), group_trace(text_grads, "text")};
}

} // namespace modprec::tasks
