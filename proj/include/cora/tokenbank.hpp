#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <vector>

#include "cora/error.hpp"
#include "cora/model.hpp"
#include "cora/rng.hpp"

namespace cora {

inline constexpr std::size_t kDefaultBankCapacity = 64;
inline constexpr std::size_t kDefaultNegatives = 32;

struct TokenSample {
    std::optional<std::vector<double>> positive;
    std::vector<std::vector<double>> negatives;
};

/// Class-keyed FIFO memory of detached SSEG vectors from labeled passes.
class TokenBank {
public:
    explicit TokenBank(std::size_t capacity_per_class = kDefaultBankCapacity) : capacity_(capacity_per_class) {
        if (capacity_ == 0) fail(ErrorCode::ConfigError, "token bank capacity must be >= 1");
    }

    void push(const SsegToken& token) {
        if (token.source != TokenSource::Labeled)
            fail(ErrorCode::SourceViolation, "only labeled-source tokens may enter the bank");
        auto& buf = per_class_[token.class_id];
        buf.push_back(token.vec);
        if (buf.size() > capacity_) buf.pop_front();
    }

    /// Positive: seeded uniform draw from the class buffer. Negatives: up to
    /// `n_neg` seeded draws without replacement from all other classes.
    TokenSample sample(std::uint8_t class_id, std::size_t n_neg, std::uint64_t seed) const {
        if (n_neg < 1) fail(ErrorCode::ConfigError, "n_neg must be >= 1");
        Rng rng(seed);
        TokenSample out;
        if (auto it = per_class_.find(class_id); it != per_class_.end() && !it->second.empty())
            out.positive = it->second[rng.below(it->second.size())];

        std::vector<const std::vector<double>*> pool;
        for (const auto& [cls, buf] : per_class_)
            if (cls != class_id)
                for (const auto& v : buf) pool.push_back(&v);
        const std::size_t take = std::min(n_neg, pool.size());
        // partial Fisher-Yates
        for (std::size_t i = 0; i < take; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
            out.negatives.push_back(*pool[i]);
        }
        return out;
    }

    void clear() { per_class_.clear(); }

    std::size_t size(std::uint8_t class_id) const {
        auto it = per_class_.find(class_id);
        return it == per_class_.end() ? 0 : it->second.size();
    }
    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [cls, buf] : per_class_) n += buf.size();
        return n;
    }
    std::size_t capacity_per_class() const { return capacity_; }
    const std::deque<std::vector<double>>& buffer(std::uint8_t class_id) const {
        static const std::deque<std::vector<double>> empty;
        auto it = per_class_.find(class_id);
        return it == per_class_.end() ? empty : it->second;
    }

private:
    std::size_t capacity_;
    std::map<std::uint8_t, std::deque<std::vector<double>>> per_class_;
};

} // namespace cora
