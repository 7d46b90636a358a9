#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modprec/errors.hpp"
#include "modprec/la.hpp"

namespace modprec::tasks {

enum class TaskKind { quadratic_pair, toy_token };
enum class Modality { image, text, mixed };

/// How modality is routed onto batches. step: one modality per training step,
/// synchronized across its micro-batches. half: one modality per half of the
/// accumulation window (synchronized task routing at sub-window granularity).
/// micro: each micro-batch draws its own modality (modality-centric
/// micro-batches). sample: every sample draws its own modality (mixed
/// batches).
enum class Routing { step, half, micro, sample };

/// Synthetic two-modality objective with a controllable gradient-covariance
/// imbalance between the image and text streams.
///
/// quadratic_pair: theta in R^dim, per-sample loss 1/2 (theta - x)^T H (theta - x)
/// with x ~ N(mu_mod * 1, c_mod * I); the image stream's sample covariance is
/// cov_ratio times the text stream's.
///
/// toy_token: tied embedding next-token model over a joint vocabulary.
/// Image sequences follow a fixed random class-transition rule (uniform
/// within the next class) blended with uniform noise: a near-uniform,
/// high-entropy stream with an irreducible within-class spread, so image
/// gradients stay large and carry heavy per-batch sampling noise. Text tokens are grouped into
/// classes with a fixed class-transition rule and a Zipf distribution within
/// each class: a low-entropy stream whose structure is shared across batches
/// (consistent, low-variance gradients concentrated on a low-rank subspace).
struct ModalityTaskSpec {
    TaskKind kind = TaskKind::quadratic_pair;
    double mixing = 0.5; // probability of the image modality per routing unit
    Routing routing = Routing::step;
    int route_block = 8; // micro-batches per routing block (half routing)
    std::uint64_t seed = 0;

    // quadratic_pair
    int dim = 8;
    double h_cond = 10.0;       // condition number of the shared curvature
    double h_scale = 1.0;       // largest curvature eigenvalue
    double cov_scale_text = 1e-3;
    double cov_ratio = 100.0;   // Tr(Sigma_img) / Tr(Sigma_text)
    double mu_img = 0.0;
    double mu_text = 0.0;
    double init_scale = 3.0;

    // toy_token
    int vocab_img = 256;
    int vocab_text = 256;
    int embed_dim = 32;
    int seq_len = 16;
    double img_bigram_mix = 0.3; // P(next token follows the class structure); 0 = iid uniform
    int img_classes = 32;        // token classes in the image stream
    int text_classes = 64;       // text topics; <= 1 means one flat Zipf
    double zipf_exponent = 1.3;
    double embed_init_scale = 0.2;

    void validate() const;
    int vocab_total() const { return vocab_img + vocab_text; }
};

struct MicroBatch {
    Modality modality = Modality::image;
    int size = 0;
    // quadratic_pair: one sample per column
    Mat real_samples;
    std::vector<Modality> sample_modality; // per column / per sequence
    // toy_token: one token sequence per entry
    std::vector<std::vector<int>> token_seqs;
};

struct NamedParam {
    std::string name;
    Mat value;
};
using ParamSet = std::vector<NamedParam>;

struct LossGrad {
    double loss_image = 0.0; // mean per-sample loss over image samples (0 if none)
    double loss_text = 0.0;
    long n_image = 0;
    long n_text = 0;
    ParamSet grad;
};

/// Sample-weighted total loss across both modalities.
double total_loss(const LossGrad& lg);

/// A task spec with its derived quantities (curvature, covariance roots,
/// Zipf tables) built once. All sampling is a pure function of
/// (seed, micro_index).
class TaskInstance {
public:
    explicit TaskInstance(const ModalityTaskSpec& spec);

    const ModalityTaskSpec& spec() const { return spec_; }

    ParamSet init_params() const;
    /// Modality is drawn per step, per micro-batch, or per sample according
    /// to the routing mode. Content is a pure function of
    /// (seed, step, micro_in_step).
    MicroBatch sample_micro_batch(long step, long micro_in_step, int size) const;
    LossGrad loss_and_grad(const ParamSet& params, const MicroBatch& batch) const;

    // quadratic_pair internals, exposed for oracle checks
    const Mat& curvature() const { return h_; }
    Vec modality_mean(Modality m) const;

private:
    ModalityTaskSpec spec_;
    // quadratic_pair
    Mat h_;         // shared SPD curvature
    Mat c_sqrt_img_;
    Mat c_sqrt_text_;
    // toy_token
    std::vector<double> zipf_cdf_;       // within a text topic
    std::vector<double> topic_cdf_;      // over text topics
    std::vector<int> img_next_;          // fixed image class-transition permutation
    int class_size_ = 0;
    int img_class_size_ = 0;

    LossGrad quadratic_loss_grad(const ParamSet& params, const MicroBatch& batch) const;
    LossGrad token_loss_grad(const ParamSet& params, const MicroBatch& batch) const;
};

/// Per-coordinate unbiased sample variance of the micro-gradients, summed
/// over coordinates, per modality. Requires >= 2 micro-gradients per group.
std::pair<double, double> covariance_trace_estimate(const std::vector<Vec>& img_grads,
                                                    const std::vector<Vec>& text_grads);

} // namespace modprec::tasks
