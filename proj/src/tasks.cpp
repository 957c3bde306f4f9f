#include "niwf/tasks.hpp"

#include <algorithm>
#include <numeric>

namespace niwf {

namespace {

std::vector<int32_t> random_payload(LenRange len, const Vocab& vocab, Rng& rng) {
    if (len.lo < 1 || len.hi < len.lo) throw ContractError("payload length range invalid");
    int32_t m = len.lo + static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(len.hi - len.lo + 1)));
    std::vector<int32_t> p(static_cast<size_t>(m));
    int32_t span = vocab.size - Vocab::kFirstPayload;
    for (auto& s : p) s = Vocab::kFirstPayload + static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(span)));
    return p;
}

Example assemble(const std::vector<int32_t>& prompt, const std::vector<int32_t>& response) {
    Example e;
    e.tokens.push_back(Vocab::kBos);
    e.tokens.insert(e.tokens.end(), prompt.begin(), prompt.end());
    e.tokens.push_back(Vocab::kSep);
    e.tokens.insert(e.tokens.end(), response.begin(), response.end());
    e.loss_mask.assign(e.tokens.size(), 0);
    size_t sep_pos = 1 + prompt.size();
    for (size_t i = sep_pos + 1; i < e.tokens.size(); ++i) e.loss_mask[i] = 1;
    return e;
}

}  // namespace

std::vector<Example> gen_copy(int64_t n, LenRange len, const Vocab& vocab, Rng& rng) {
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        auto p = random_payload(len, vocab, rng);
        out.push_back(assemble(p, p));
    }
    return out;
}

std::vector<Example> gen_reverse(int64_t n, LenRange len, const Vocab& vocab, Rng& rng) {
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        auto p = random_payload(len, vocab, rng);
        std::vector<int32_t> r(p.rbegin(), p.rend());
        out.push_back(assemble(p, r));
    }
    return out;
}

std::vector<Example> gen_neutral(int64_t n, LenRange len, const Vocab& vocab, Rng& rng) {
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        auto p = random_payload(len, vocab, rng);
        size_t cut = 1 + static_cast<size_t>(rng.uniform_int(p.size()));
        std::vector<int32_t> prefix(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(cut));
        out.push_back(assemble(p, prefix));
    }
    return out;
}

namespace {

Batch pack(const std::vector<const Example*>& group, int64_t t_max) {
    int64_t b = static_cast<int64_t>(group.size());
    int64_t t = 0;
    for (const Example* e : group) {
        int64_t len = static_cast<int64_t>(e->tokens.size());
        if (len > t_max) {
            throw ContractError("example length " + std::to_string(len) + " exceeds max_seq_len " +
                                std::to_string(t_max));
        }
        t = std::max(t, len);
    }
    Batch out;
    out.tokens = IntArray::zeros({b, t});
    out.targets = IntArray::zeros({b, t});
    out.loss_mask = IntArray::zeros({b, t});
    out.valid = IntArray::zeros({b, t});
    for (int64_t i = 0; i < b; ++i) {
        const Example& e = *group[static_cast<size_t>(i)];
        int64_t len = static_cast<int64_t>(e.tokens.size());
        for (int64_t j = 0; j < len; ++j) {
            out.tokens.v[static_cast<size_t>(i * t + j)] = e.tokens[static_cast<size_t>(j)];
            out.valid.v[static_cast<size_t>(i * t + j)] = 1;
        }
        for (int64_t j = 0; j + 1 < len; ++j) {
            out.targets.v[static_cast<size_t>(i * t + j)] = e.tokens[static_cast<size_t>(j + 1)];
            out.loss_mask.v[static_cast<size_t>(i * t + j)] = e.loss_mask[static_cast<size_t>(j + 1)] ? 1 : 0;
        }
    }
    return out;
}

std::vector<Batch> batches_in_order(const std::vector<Example>& examples, const std::vector<size_t>& order,
                                    int64_t batch, int64_t t_max) {
    if (batch < 1) throw ContractError("batch size must be >= 1");
    std::vector<Batch> out;
    for (size_t start = 0; start + 1 <= order.size(); start += static_cast<size_t>(batch)) {
        size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
        std::vector<const Example*> group;
        group.reserve(end - start);
        for (size_t i = start; i < end; ++i) group.push_back(&examples[order[i]]);
        out.push_back(pack(group, t_max));
    }
    return out;
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<Example>& examples, int64_t batch, int64_t t_max, Rng& rng) {
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    return batches_in_order(examples, order, batch, t_max);
}

std::vector<Batch> epoch_batches(const std::vector<Example>& examples, int64_t batch, int64_t t_max,
                                 uint64_t seed, int64_t epoch) {
    Rng rng = Rng(seed).split(static_cast<uint64_t>(epoch) + 0x5eedULL);
    return make_batches(examples, batch, t_max, rng);
}

std::vector<Batch> eval_batches(const std::vector<Example>& examples, int64_t batch, int64_t t_max) {
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    return batches_in_order(examples, order, batch, t_max);
}

}  // namespace niwf
