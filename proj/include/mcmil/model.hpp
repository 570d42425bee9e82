#ifndef MCMIL_MODEL_HPP
#define MCMIL_MODEL_HPP

#include <string>

#include "mcmil/numerics.hpp"

namespace mcmil {

enum class Pooling { attention, mean };

struct ModelDims {
    int in_dim = 16;
    int hidden = 32;
    int latent = 16;
    int attn_hidden = 8;
    int n_classes = 5;
    Pooling pooling = Pooling::attention;

    void validate() const;
};

/// Encoder in -> hidden (tanh) -> latent (linear); attention score
/// s = w . tanh(V u + c) over latents u; head logits = W z + b.
/// Also used as the gradient container (same shapes).
struct ModelParams {
    ModelDims dims;
    Matrix enc_w1;  // hidden x in_dim
    Vector enc_b1;
    Matrix enc_w2;  // latent x hidden
    Vector enc_b2;
    Matrix attn_v;  // attn_hidden x latent
    Vector attn_c;
    Vector attn_w;  // attn_hidden
    Matrix head_w;  // n_classes x latent
    Vector head_b;

    static ModelParams zeros(const ModelDims& dims);
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer.
    static ModelParams initialize(const ModelDims& dims, Rng& rng);

    std::size_t size() const;
    Vector flatten() const;
    void assign(const Vector& flat);
    void validate() const;

    ModelParams& operator+=(const ModelParams& other);
    ModelParams& operator*=(double s);
};

struct AttentionPool {
    Vector weights;
    Vector z;
};

/// Everything the backward pass needs, plus the SlideForward fields.
struct SlideForward {
    Matrix hidden;       // N x hidden, post-tanh
    Matrix latents;      // N x latent
    Matrix attn_hidden;  // N x attn_hidden, post-tanh (attention pooling only)
    Vector weights;      // N, on the simplex
    Vector z;            // latent
    Vector logits;       // n_classes
};

Vector encode_patch(const Vector& x, const ModelParams& p);
Matrix encode_patches(const Matrix& patches, const ModelParams& p, Matrix* hidden_out = nullptr);
AttentionPool attention_pool(const Matrix& latents, const ModelParams& p,
                             Matrix* attn_hidden_out = nullptr);
Vector classify(const Vector& z, const ModelParams& p);

SlideForward forward(const Matrix& patches, const ModelParams& p);

struct SlideGradients {
    ModelParams params;
    Matrix inputs;  // d/d patches, N x in_dim
};

/// Backpropagates dL/dlogits and an extra dL/dz (from feature-space losses)
/// through head, pooling and encoder.
SlideGradients backward(const Matrix& patches, const SlideForward& fwd, const ModelParams& p,
                        const Vector& dlogits, const Vector& dz_extra, bool want_inputs = false);

// Checkpoint JSON: dims, pooling, every weight array and a format_version.
inline constexpr int kCheckpointFormatVersion = 1;
std::string model_to_json(const ModelParams& p);
ModelParams model_from_json(const std::string& text);
void save_model(const ModelParams& p, const std::string& path);
ModelParams load_model(const std::string& path);

const char* to_string(Pooling pooling) noexcept;
Pooling pooling_from_string(const std::string& name);

}  // namespace mcmil

#endif
