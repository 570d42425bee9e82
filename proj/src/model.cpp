#include "mcmil/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mcmil {

using nlohmann::json;

void ModelDims::validate() const {
    require(in_dim >= 1 && hidden >= 1 && latent >= 1 && attn_hidden >= 1, ErrorCode::dimension,
            "ModelDims: all layer sizes must be >= 1");
    require(n_classes >= 2, ErrorCode::dimension, "ModelDims: n_classes must be >= 2");
}

const char* to_string(Pooling pooling) noexcept {
    return pooling == Pooling::attention ? "attention" : "mean";
}

Pooling pooling_from_string(const std::string& name) {
    if (name == "attention") {
        return Pooling::attention;
    }
    if (name == "mean" || name == "uniform") {
        return Pooling::mean;
    }
    fail(ErrorCode::config, "unknown pooling '" + name + "'");
}

ModelParams ModelParams::zeros(const ModelDims& dims) {
    dims.validate();
    ModelParams p;
    p.dims = dims;
    p.enc_w1 = Matrix::Zero(dims.hidden, dims.in_dim);
    p.enc_b1 = Vector::Zero(dims.hidden);
    p.enc_w2 = Matrix::Zero(dims.latent, dims.hidden);
    p.enc_b2 = Vector::Zero(dims.latent);
    p.attn_v = Matrix::Zero(dims.attn_hidden, dims.latent);
    p.attn_c = Vector::Zero(dims.attn_hidden);
    p.attn_w = Vector::Zero(dims.attn_hidden);
    p.head_w = Matrix::Zero(dims.n_classes, dims.latent);
    p.head_b = Vector::Zero(dims.n_classes);
    return p;
}

namespace {

template <class Derived>
void fill_uniform(Eigen::MatrixBase<Derived>& m, double bound, Rng& rng) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            m(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
        }
    }
}

// Fixed traversal order shared by flatten/assign/size.
template <class P, class Fn>
void for_each_block(P& p, Fn&& fn) {
    fn(p.enc_w1);
    fn(p.enc_b1);
    fn(p.enc_w2);
    fn(p.enc_b2);
    fn(p.attn_v);
    fn(p.attn_c);
    fn(p.attn_w);
    fn(p.head_w);
    fn(p.head_b);
}

}  // namespace

ModelParams ModelParams::initialize(const ModelDims& dims, Rng& rng) {
    ModelParams p = zeros(dims);
    const double b_in = 1.0 / std::sqrt(static_cast<double>(dims.in_dim));
    const double b_hidden = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
    const double b_latent = 1.0 / std::sqrt(static_cast<double>(dims.latent));
    const double b_attn = 1.0 / std::sqrt(static_cast<double>(dims.attn_hidden));
    fill_uniform(p.enc_w1, b_in, rng);
    fill_uniform(p.enc_b1, b_in, rng);
    fill_uniform(p.enc_w2, b_hidden, rng);
    fill_uniform(p.enc_b2, b_hidden, rng);
    fill_uniform(p.attn_v, b_latent, rng);
    fill_uniform(p.attn_c, b_latent, rng);
    fill_uniform(p.attn_w, b_attn, rng);
    fill_uniform(p.head_w, b_latent, rng);
    fill_uniform(p.head_b, b_latent, rng);
    return p;
}

std::size_t ModelParams::size() const {
    std::size_t n = 0;
    for_each_block(*this, [&](const auto& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

Vector ModelParams::flatten() const {
    Vector out(static_cast<Eigen::Index>(size()));
    Eigen::Index off = 0;
    for_each_block(*this, [&](const auto& m) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
                out[off++] = m(i, j);
            }
        }
    });
    return out;
}

void ModelParams::assign(const Vector& flat) {
    require(static_cast<std::size_t>(flat.size()) == size(), ErrorCode::dimension,
            "ModelParams::assign: flat vector length mismatch");
    Eigen::Index off = 0;
    for_each_block(*this, [&](auto& m) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
                m(i, j) = flat[off++];
            }
        }
    });
}

void ModelParams::validate() const {
    dims.validate();
    const bool shapes_ok =
        enc_w1.rows() == dims.hidden && enc_w1.cols() == dims.in_dim && enc_b1.size() == dims.hidden &&
        enc_w2.rows() == dims.latent && enc_w2.cols() == dims.hidden && enc_b2.size() == dims.latent &&
        attn_v.rows() == dims.attn_hidden && attn_v.cols() == dims.latent &&
        attn_c.size() == dims.attn_hidden && attn_w.size() == dims.attn_hidden &&
        head_w.rows() == dims.n_classes && head_w.cols() == dims.latent &&
        head_b.size() == dims.n_classes;
    require(shapes_ok, ErrorCode::dimension, "ModelParams: array shapes disagree with dims");
    bool finite = true;
    for_each_block(*this, [&](const auto& m) { finite = finite && m.allFinite(); });
    require(finite, ErrorCode::evaluation, "ModelParams: non-finite weight");
}

ModelParams& ModelParams::operator+=(const ModelParams& other) {
    enc_w1 += other.enc_w1;
    enc_b1 += other.enc_b1;
    enc_w2 += other.enc_w2;
    enc_b2 += other.enc_b2;
    attn_v += other.attn_v;
    attn_c += other.attn_c;
    attn_w += other.attn_w;
    head_w += other.head_w;
    head_b += other.head_b;
    return *this;
}

ModelParams& ModelParams::operator*=(double s) {
    for_each_block(*this, [&](auto& m) { m *= s; });
    return *this;
}

Matrix encode_patches(const Matrix& patches, const ModelParams& p, Matrix* hidden_out) {
    require(patches.cols() == p.dims.in_dim, ErrorCode::dimension,
            "encode: patch dimension differs from in_dim");
    Matrix hidden = ((patches * p.enc_w1.transpose()).rowwise() + p.enc_b1.transpose())
                        .array()
                        .tanh()
                        .matrix();
    Matrix latents = (hidden * p.enc_w2.transpose()).rowwise() + p.enc_b2.transpose();
    if (hidden_out != nullptr) {
        *hidden_out = std::move(hidden);
    }
    return latents;
}

Vector encode_patch(const Vector& x, const ModelParams& p) {
    require(x.size() == p.dims.in_dim, ErrorCode::dimension,
            "encode_patch: input dimension differs from in_dim");
    return encode_patches(x.transpose(), p).row(0).transpose();
}

AttentionPool attention_pool(const Matrix& latents, const ModelParams& p, Matrix* attn_hidden_out) {
    require(latents.rows() >= 1, ErrorCode::empty_bag, "attention_pool: empty bag");
    require(latents.cols() == p.dims.latent, ErrorCode::dimension,
            "attention_pool: latent dimension mismatch");
    const Eigen::Index n = latents.rows();
    AttentionPool out;
    if (p.dims.pooling == Pooling::mean) {
        out.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
    } else {
        Matrix t = ((latents * p.attn_v.transpose()).rowwise() + p.attn_c.transpose())
                       .array()
                       .tanh()
                       .matrix();
        const Vector scores = t * p.attn_w;
        const double top = scores.maxCoeff();
        Vector e = (scores.array() - top).exp().matrix();
        out.weights = e / e.sum();
        if (attn_hidden_out != nullptr) {
            *attn_hidden_out = std::move(t);
        }
    }
    out.z = latents.transpose() * out.weights;
    return out;
}

Vector classify(const Vector& z, const ModelParams& p) {
    require(z.size() == p.dims.latent, ErrorCode::dimension, "classify: z dimension mismatch");
    return p.head_w * z + p.head_b;
}

SlideForward forward(const Matrix& patches, const ModelParams& p) {
    require(patches.rows() >= 1, ErrorCode::empty_bag, "forward: empty bag");
    SlideForward f;
    f.latents = encode_patches(patches, p, &f.hidden);
    AttentionPool pool = attention_pool(f.latents, p, &f.attn_hidden);
    f.weights = std::move(pool.weights);
    f.z = std::move(pool.z);
    f.logits = classify(f.z, p);
    return f;
}

SlideGradients backward(const Matrix& patches, const SlideForward& fwd, const ModelParams& p,
                        const Vector& dlogits, const Vector& dz_extra, bool want_inputs) {
    require(dlogits.size() == p.dims.n_classes && dz_extra.size() == p.dims.latent,
            ErrorCode::dimension, "backward: upstream gradient shape mismatch");
    SlideGradients g{ModelParams::zeros(p.dims), Matrix()};
    ModelParams& d = g.params;

    d.head_w = dlogits * fwd.z.transpose();
    d.head_b = dlogits;
    const Vector dz = p.head_w.transpose() * dlogits + dz_extra;

    Matrix du = fwd.weights * dz.transpose();  // N x latent
    if (p.dims.pooling == Pooling::attention) {
        const Vector da = fwd.latents * dz;
        const double mean_da = fwd.weights.dot(da);
        const Vector ds = fwd.weights.cwiseProduct((da.array() - mean_da).matrix());
        d.attn_w = fwd.attn_hidden.transpose() * ds;
        const Matrix dpre = ((ds * p.attn_w.transpose()).array() *
                             (1.0 - fwd.attn_hidden.array().square()))
                                .matrix();
        d.attn_v = dpre.transpose() * fwd.latents;
        d.attn_c = dpre.colwise().sum().transpose();
        du += dpre * p.attn_v;
    }

    d.enc_w2 = du.transpose() * fwd.hidden;
    d.enc_b2 = du.colwise().sum().transpose();
    const Matrix dh = du * p.enc_w2;
    const Matrix dpre1 = (dh.array() * (1.0 - fwd.hidden.array().square())).matrix();
    d.enc_w1 = dpre1.transpose() * patches;
    d.enc_b1 = dpre1.colwise().sum().transpose();
    if (want_inputs) {
        g.inputs = dpre1 * p.enc_w1;
    }
    return g;
}

namespace {

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            row[static_cast<std::size_t>(j)] = m(i, j);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_to_json(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
    const auto data = j.get<std::vector<std::vector<double>>>();
    require(static_cast<Eigen::Index>(data.size()) == rows, ErrorCode::dimension,
            std::string("checkpoint: wrong row count for ") + name);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = data[static_cast<std::size_t>(i)];
        require(static_cast<Eigen::Index>(row.size()) == cols, ErrorCode::dimension,
                std::string("checkpoint: wrong column count for ") + name);
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(i, c) = row[static_cast<std::size_t>(c)];
        }
    }
    return m;
}

Vector vector_from_json(const json& j, Eigen::Index size, const char* name) {
    const auto data = j.get<std::vector<double>>();
    require(static_cast<Eigen::Index>(data.size()) == size, ErrorCode::dimension,
            std::string("checkpoint: wrong length for ") + name);
    return Eigen::Map<const Vector>(data.data(), size);
}

}  // namespace

std::string model_to_json(const ModelParams& p) {
    json doc;
    doc["format_version"] = kCheckpointFormatVersion;
    doc["dims"] = {{"in_dim", p.dims.in_dim},         {"hidden", p.dims.hidden},
                   {"latent", p.dims.latent},         {"attn_hidden", p.dims.attn_hidden},
                   {"n_classes", p.dims.n_classes},   {"pooling", to_string(p.dims.pooling)}};
    doc["encoder"] = {{"w1", matrix_to_json(p.enc_w1)},
                      {"b1", vector_to_json(p.enc_b1)},
                      {"w2", matrix_to_json(p.enc_w2)},
                      {"b2", vector_to_json(p.enc_b2)}};
    doc["attention"] = {{"v", matrix_to_json(p.attn_v)},
                        {"c", vector_to_json(p.attn_c)},
                        {"w", vector_to_json(p.attn_w)}};
    doc["head"] = {{"w", matrix_to_json(p.head_w)}, {"b", vector_to_json(p.head_b)}};
    return doc.dump(1);
}

ModelParams model_from_json(const std::string& text) {
    try {
        const json doc = json::parse(text);
        const int version = doc.at("format_version").get<int>();
        require(version == kCheckpointFormatVersion, ErrorCode::io,
                "checkpoint: unsupported format_version " + std::to_string(version));
        const json& dj = doc.at("dims");
        ModelDims dims;
        dims.in_dim = dj.at("in_dim").get<int>();
        dims.hidden = dj.at("hidden").get<int>();
        dims.latent = dj.at("latent").get<int>();
        dims.attn_hidden = dj.at("attn_hidden").get<int>();
        dims.n_classes = dj.at("n_classes").get<int>();
        dims.pooling = pooling_from_string(dj.value("pooling", std::string("attention")));
        dims.validate();
        ModelParams p = ModelParams::zeros(dims);
        const json& enc = doc.at("encoder");
        p.enc_w1 = matrix_from_json(enc.at("w1"), dims.hidden, dims.in_dim, "encoder.w1");
        p.enc_b1 = vector_from_json(enc.at("b1"), dims.hidden, "encoder.b1");
        p.enc_w2 = matrix_from_json(enc.at("w2"), dims.latent, dims.hidden, "encoder.w2");
        p.enc_b2 = vector_from_json(enc.at("b2"), dims.latent, "encoder.b2");
        const json& att = doc.at("attention");
        p.attn_v = matrix_from_json(att.at("v"), dims.attn_hidden, dims.latent, "attention.v");
        p.attn_c = vector_from_json(att.at("c"), dims.attn_hidden, "attention.c");
        p.attn_w = vector_from_json(att.at("w"), dims.attn_hidden, "attention.w");
        const json& head = doc.at("head");
        p.head_w = matrix_from_json(head.at("w"), dims.n_classes, dims.latent, "head.w");
        p.head_b = vector_from_json(head.at("b"), dims.n_classes, "head.b");
        p.validate();
        return p;
    } catch (const json::exception& e) {
        fail(ErrorCode::io, std::string("checkpoint: ") + e.what());
    }
}

void save_model(const ModelParams& p, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot open " + path + " for writing");
    out << model_to_json(p) << '\n';
    require(static_cast<bool>(out), ErrorCode::io, "write failed: " + path);
}

ModelParams load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return model_from_json(buf.str());
}

}  // namespace mcmil
