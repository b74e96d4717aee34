#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cprompt/data.hpp"
#include "cprompt/ops.hpp"
#include "cprompt/optim.hpp"
#include "cprompt/rng.hpp"
#include "cprompt/serialize.hpp"
#include "cprompt/tensor.hpp"

namespace cprompt {

// Small vision transformer sized for CPU experiments. Prompts are split into
// contiguous segments; before each layer listed in prompt_insert_layers
// (1-based) the matching segment is prepended to the token sequence, and the
// prompt token outputs are dropped again right after that layer. Prompt
// tokens receive no positional embedding and attend like any other token.
struct BackboneConfig {
    int image_size = 16;
    int patch_size = 4;
    int channels = 3;
    int embed_dim = 32;
    int num_layers = 6;
    int num_heads = 2;
    int mlp_ratio = 2;
    int prompt_len = 8;                         // L_P, total prompt rows
    std::vector<int> prompt_insert_layers{1, 4};  // 1-based, ascending

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int token_len() const { return num_patches() + 1; }  // + class token
    int patch_dim() const { return channels * patch_size * patch_size; }
    int num_segments() const { return static_cast<int>(prompt_insert_layers.size()); }
    int segment_len() const { return prompt_len / num_segments(); }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw std::invalid_argument("BackboneConfig: patch size must divide image size");
        if (channels <= 0 || embed_dim <= 0 || num_layers <= 0 || mlp_ratio <= 0)
            throw std::invalid_argument("BackboneConfig: dims must be positive");
        if (num_heads <= 0 || embed_dim % num_heads != 0)
            throw std::invalid_argument("BackboneConfig: heads must divide embed_dim");
        if (prompt_insert_layers.empty())
            throw std::invalid_argument("BackboneConfig: need at least one insertion layer");
        int prev = 0;
        for (int layer : prompt_insert_layers) {
            if (layer < 1 || layer > num_layers)
                throw std::invalid_argument("BackboneConfig: insertion layer out of range");
            if (layer <= prev)
                throw std::invalid_argument("BackboneConfig: insertion layers must be ascending");
            prev = layer;
        }
        if (prompt_len <= 0 || prompt_len % num_segments() != 0)
            throw std::invalid_argument("BackboneConfig: segments must divide prompt_len");
    }

    bool operator==(const BackboneConfig&) const = default;
};

template <std::floating_point T>
class Backbone {
public:
    Backbone() = default;

    Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const int d = cfg.embed_dim;
        patch_w_ = Tensor<T>::randn({cfg.patch_dim(), d}, rng, 0.02);
        patch_b_ = Tensor<T>({d});
        class_token_ = Tensor<T>::randn({1, d}, rng, 0.02);
        pos_embed_ = Tensor<T>::randn({cfg.token_len(), d}, rng, 0.02);
        for (int l = 0; l < cfg.num_layers; ++l) {
            Layer layer;
            layer.ln1_g = Tensor<T>({d}, T(1));
            layer.ln1_b = Tensor<T>({d});
            layer.w_qkv = Tensor<T>::randn({d, 3 * d}, rng, 0.02);
            layer.b_qkv = Tensor<T>({3 * d});
            layer.w_proj = Tensor<T>::randn({d, d}, rng, 0.02);
            layer.b_proj = Tensor<T>({d});
            layer.ln2_g = Tensor<T>({d}, T(1));
            layer.ln2_b = Tensor<T>({d});
            layer.w_fc1 = Tensor<T>::randn({d, cfg.mlp_ratio * d}, rng, 0.02);
            layer.b_fc1 = Tensor<T>({cfg.mlp_ratio * d});
            layer.w_fc2 = Tensor<T>::randn({cfg.mlp_ratio * d, d}, rng, 0.02);
            layer.b_fc2 = Tensor<T>({d});
            layers_.push_back(std::move(layer));
        }
        ln_f_g_ = Tensor<T>({d}, T(1));
        ln_f_b_ = Tensor<T>({d});
        set_trainable(true);
    }

    const BackboneConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }

    void freeze() {
        set_trainable(false);
        frozen_ = true;
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out{patch_w_, patch_b_, class_token_, pos_embed_};
        for (auto& l : layers_) {
            for (auto* t : {&l.ln1_g, &l.ln1_b, &l.w_qkv, &l.b_qkv, &l.w_proj, &l.b_proj,
                            &l.ln2_g, &l.ln2_b, &l.w_fc1, &l.b_fc1, &l.w_fc2, &l.b_fc2})
                out.push_back(*t);
        }
        out.push_back(ln_f_g_);
        out.push_back(ln_f_b_);
        return out;
    }

    std::vector<Tensor<T>> parameters() const {
        return const_cast<Backbone*>(this)->parameters();
    }

    // Hash over the serialized weights; freezing invariance checks compare it
    // before and after training runs.
    std::uint64_t content_hash() const {
        ByteWriter w;
        serialize_weights(w);
        return fnv1a(w.bytes().data(), w.bytes().size());
    }

    // images (B, channels*image_size^2) -> tokens (B, L+1, D): row 0 is the
    // class token, rows 1..L are patch projections; positional embeddings are
    // added to every row.
    Tensor<T> embed(const Tensor<T>& images) const {
        auto patches = patchify(images);
        auto proj = linear(patches, patch_w_, patch_b_);
        const int b = images.dim(0);
        auto tokens = reshape(proj, {b, cfg_.num_patches(), cfg_.embed_dim});
        tokens = concat_tokens(class_token_, tokens);
        return add_broadcast_rows(tokens, pos_embed_);
    }

    // Class-token features with prompt segments inserted; prompt must be
    // (prompt_len, D). Returns (B, D).
    Tensor<T> forward_with_prompt(const Tensor<T>& images, const Tensor<T>& prompt) const {
        if (prompt.ndim() != 2 || prompt.dim(0) != cfg_.prompt_len ||
            prompt.dim(1) != cfg_.embed_dim)
            throw std::invalid_argument("forward_with_prompt: prompt must be (prompt_len, embed_dim)");
        return features(images, &prompt);
    }

    // Prompt-free forward used for query features; with a frozen backbone the
    // result carries no graph and no gradient can reach the weights.
    Tensor<T> forward_query(const Tensor<T>& images) const { return features(images, nullptr); }

    void serialize_weights(ByteWriter& w) const {
        for (const auto& t : parameters()) w.put_tensor(t);
    }

    void deserialize_weights(ByteReader& r) {
        for (auto& t : parameters()) {
            auto loaded = r.get_tensor<T>();
            if (loaded.shape() != t.shape())
                throw std::runtime_error("Backbone: checkpoint weight shape mismatch");
            t.values() = loaded.values();
            t.set_requires_grad(loaded.requires_grad());
        }
        frozen_ = !parameters().front().requires_grad();
    }

    void serialize_config(ByteWriter& w) const {
        w.put_i32(cfg_.image_size);
        w.put_i32(cfg_.patch_size);
        w.put_i32(cfg_.channels);
        w.put_i32(cfg_.embed_dim);
        w.put_i32(cfg_.num_layers);
        w.put_i32(cfg_.num_heads);
        w.put_i32(cfg_.mlp_ratio);
        w.put_i32(cfg_.prompt_len);
        w.put_u32(static_cast<std::uint32_t>(cfg_.prompt_insert_layers.size()));
        for (int l : cfg_.prompt_insert_layers) w.put_i32(l);
    }

    static BackboneConfig deserialize_config(ByteReader& r) {
        BackboneConfig cfg;
        cfg.image_size = r.get_i32();
        cfg.patch_size = r.get_i32();
        cfg.channels = r.get_i32();
        cfg.embed_dim = r.get_i32();
        cfg.num_layers = r.get_i32();
        cfg.num_heads = r.get_i32();
        cfg.mlp_ratio = r.get_i32();
        cfg.prompt_len = r.get_i32();
        const auto n = r.get_u32();
        cfg.prompt_insert_layers.assign(n, 0);
        for (auto& l : cfg.prompt_insert_layers) l = r.get_i32();
        cfg.validate();
        return cfg;
    }

private:
    struct Layer {
        Tensor<T> ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
        Tensor<T> ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
    };

    void set_trainable(bool flag) {
        for (auto& t : parameters()) t.set_requires_grad(flag);
    }

    // (B, C*H*W) -> (B*L, patch_dim), pure data movement outside the graph.
    Tensor<T> patchify(const Tensor<T>& images) const {
        if (images.ndim() != 2 || images.dim(1) != cfg_.channels * cfg_.image_size * cfg_.image_size)
            throw std::invalid_argument("Backbone: image batch has wrong pixel count");
        const int b = images.dim(0);
        const int ps = cfg_.patch_size;
        const int side = cfg_.patches_per_side();
        const int hw = cfg_.image_size;
        Tensor<T> out({b * cfg_.num_patches(), cfg_.patch_dim()});
        const T* src = images.data();
        T* dst = out.data();
        std::int64_t w = 0;
        for (int bi = 0; bi < b; ++bi) {
            const T* img = src + static_cast<std::int64_t>(bi) * cfg_.channels * hw * hw;
            for (int py = 0; py < side; ++py) {
                for (int px = 0; px < side; ++px) {
                    for (int c = 0; c < cfg_.channels; ++c) {
                        const T* plane = img + static_cast<std::int64_t>(c) * hw * hw;
                        for (int y = 0; y < ps; ++y) {
                            const T* row = plane + static_cast<std::int64_t>(py * ps + y) * hw + px * ps;
                            for (int x = 0; x < ps; ++x) dst[w++] = row[x];
                        }
                    }
                }
            }
        }
        return out;
    }

    Tensor<T> block(int l, Tensor<T> x) const {
        const auto& L = layers_[static_cast<std::size_t>(l)];
        auto a = layer_norm_rows(x, L.ln1_g, L.ln1_b);
        auto qkv = linear(a, L.w_qkv, L.b_qkv);
        auto attn = attention_qkv(qkv, cfg_.num_heads);
        x = add(x, linear(attn, L.w_proj, L.b_proj));
        auto m = layer_norm_rows(x, L.ln2_g, L.ln2_b);
        m = linear(gelu(linear(m, L.w_fc1, L.b_fc1)), L.w_fc2, L.b_fc2);
        return add(x, m);
    }

    Tensor<T> features(const Tensor<T>& images, const Tensor<T>* prompt) const {
        auto tokens = embed(images);
        int segment = 0;
        const int seg_len = cfg_.segment_len();
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const bool insert =
                prompt != nullptr &&
                std::find(cfg_.prompt_insert_layers.begin(), cfg_.prompt_insert_layers.end(),
                          l + 1) != cfg_.prompt_insert_layers.end();
            if (insert) {
                auto seg = slice_rows(*prompt, segment * seg_len, (segment + 1) * seg_len);
                ++segment;
                tokens = concat_tokens(seg, tokens);
            }
            tokens = block(l, tokens);
            if (insert) tokens = slice_tokens(tokens, seg_len, tokens.dim(1));
        }
        auto cls = reshape(slice_tokens(tokens, 0, 1), {tokens.dim(0), cfg_.embed_dim});
        return layer_norm_rows(cls, ln_f_g_, ln_f_b_);
    }

    BackboneConfig cfg_;
    bool frozen_ = false;
    Tensor<T> patch_w_, patch_b_, class_token_, pos_embed_;
    std::vector<Layer> layers_;
    Tensor<T> ln_f_g_, ln_f_b_;
};

struct PretrainResult {
    double holdout_accuracy = 0.0;
    int epochs = 0;
};

// Supervised pretraining on the disjoint pretraining classes with a throwaway
// linear head; the backbone is frozen afterwards. Labels in the pretraining
// split must not collide with any id in stream_class_ids.
template <std::floating_point T>
PretrainResult pretrain_backbone(Backbone<T>& backbone, const Dataset<T>& train,
                                 const Dataset<T>& holdout,
                                 const std::vector<int>& stream_class_ids, int epochs,
                                 int batch_size, double lr0, double momentum, Rng& rng) {
    if (backbone.frozen()) throw std::invalid_argument("pretrain_backbone: backbone already frozen");
    if (epochs <= 0 || batch_size <= 0)
        throw std::invalid_argument("pretrain_backbone: epochs and batch size must be positive");
    int num_classes = 0;
    for (int y : train.labels) {
        for (int sid : stream_class_ids)
            if (y == sid)
                throw std::invalid_argument(
                    "pretrain_backbone: pretraining classes overlap the continual stream");
        num_classes = std::max(num_classes, y + 1);
    }

    const int d = backbone.config().embed_dim;
    Tensor<T> head_w = Tensor<T>::randn({d, num_classes}, rng, 0.02);
    Tensor<T> head_b = Tensor<T>({num_classes});
    head_w.set_requires_grad(true);
    head_b.set_requires_grad(true);

    auto params = backbone.parameters();
    params.push_back(head_w);
    params.push_back(head_b);
    SgdMomentum<T> opt(momentum);
    opt.bind(params);

    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    const int steps_per_epoch =
        static_cast<int>((train.size() + batch_size - 1) / batch_size);
    const int total_steps = epochs * steps_per_epoch;
    int step = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (std::int64_t start = 0; start < train.size(); start += batch_size) {
            const auto end = std::min<std::int64_t>(start + batch_size, train.size());
            std::vector<std::int64_t> idx(order.begin() + start, order.begin() + end);
            auto [batch, labels] = make_batch(train, idx);
            auto h = backbone.forward_query(batch);
            auto loss = cross_entropy(linear(h, head_w, head_b), labels);
            loss.backward();
            opt.step(params, cosine_annealing_lr(step, total_steps, lr0));
            for (auto& p : params) p.zero_grad();
            ++step;
        }
    }

    // Holdout accuracy with the throwaway head, then drop it and freeze.
    std::int64_t correct = 0;
    const int eval_batch = 64;
    for (std::int64_t start = 0; start < holdout.size(); start += eval_batch) {
        const auto end = std::min<std::int64_t>(start + eval_batch, holdout.size());
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < end; ++i) idx.push_back(i);
        auto [batch, labels] = make_batch(holdout, idx);
        auto logits = linear(backbone.forward_query(batch), head_w, head_b);
        for (std::size_t r = 0; r < labels.size(); ++r) {
            const T* row = logits.data() + static_cast<std::int64_t>(r) * num_classes;
            int arg = 0;
            for (int j = 1; j < num_classes; ++j)
                if (row[j] > row[arg]) arg = j;
            if (arg == labels[r]) ++correct;
        }
    }
    backbone.freeze();
    PretrainResult res;
    res.epochs = epochs;
    res.holdout_accuracy =
        holdout.size() > 0 ? static_cast<double>(correct) / static_cast<double>(holdout.size()) : 0.0;
    return res;
}

}  // namespace cprompt
