#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "l3prune/error.hpp"
#include "l3prune/model.hpp"
#include "l3prune/rng.hpp"

namespace l3p {

struct ContrastiveTuple {
    TokenSeq instruction;
    TokenSeq query;
    TokenSeq positive;
    TokenSeq hard_negative;
    std::string task_id;
    bool symmetric = false;

    // Sequences as fed to the model, with the instruction prepended where it
    // applies. Symmetric tasks carry the instruction on both sides.
    TokenSeq query_tokens() const { return concat(instruction, query); }
    TokenSeq positive_tokens() const { return symmetric ? concat(instruction, positive) : positive; }
    TokenSeq negative_tokens() const { return symmetric ? concat(instruction, hard_negative) : hard_negative; }
    std::size_t doc_instruction_len() const { return symmetric ? instruction.size() : 0; }

    void validate(std::size_t vocab_size) const {
        if (query.empty()) throw DataError("tuple has an empty query");
        if (positive.empty()) throw DataError("tuple has an empty positive");
        if (hard_negative.empty()) throw DataError("tuple has an empty hard negative");
        for (const TokenSeq* s : {&instruction, &query, &positive, &hard_negative}) {
            for (std::size_t id : *s) {
                if (id >= vocab_size) {
                    throw DataError("token id " + std::to_string(id) + " out of range for vocab_size " +
                                    std::to_string(vocab_size));
                }
            }
        }
    }

    friend bool operator==(const ContrastiveTuple&, const ContrastiveTuple&) = default;

private:
    static TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
        TokenSeq out(a);
        out.insert(out.end(), b.begin(), b.end());
        return out;
    }
};

// ---------------------------------------------------------------------------
// Vocabulary: one token per line, id = line number. Ids 0 and 1 are the pad
// and unknown tokens.

class Vocabulary {
public:
    Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>"}) {}
    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < 2) throw DataError("vocabulary needs the pad and unk entries");
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!index_.emplace(tokens_[i], i).second) throw DataError("duplicate vocabulary entry " + tokens_[i]);
        }
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open vocabulary " + path.string());
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(in, line)) tokens.push_back(line);
        return Vocabulary(std::move(tokens));
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw DataError("cannot write vocabulary " + path.string());
        for (const auto& t : tokens_) out << t << '\n';
    }

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(std::size_t id) const { return tokens_.at(id); }

    std::size_t id(std::string_view word) const {
        auto it = index_.find(std::string(word));
        return it == index_.end() ? kUnkId : it->second;
    }

    TokenSeq tokenize(std::string_view text) const {
        TokenSeq out;
        std::istringstream is{std::string(text)};
        std::string word;
        while (is >> word) out.push_back(id(word));
        return out;
    }

    std::string detokenize(const TokenSeq& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// JSONL tuples: {"instruction", "query", "positive", "negative", "task", "symmetric"}

inline std::vector<ContrastiveTuple> parse_jsonl(std::istream& in, const Vocabulary& vocab) {
    std::vector<ContrastiveTuple> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "line " + std::to_string(line_no);
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (!obj.is_object()) throw DataError(where + ": expected a JSON object");
        auto text = [&](const char* field) {
            if (!obj.contains(field)) throw DataError(where + ": missing field " + field);
            if (!obj[field].is_string()) throw DataError(where + ": field " + field + " must be a string");
            return vocab.tokenize(obj[field].get<std::string>());
        };
        ContrastiveTuple t;
        t.instruction = text("instruction");
        t.query = text("query");
        t.positive = text("positive");
        t.hard_negative = text("negative");
        if (!obj.contains("task")) throw DataError(where + ": missing field task");
        if (!obj["task"].is_string()) throw DataError(where + ": field task must be a string");
        t.task_id = obj["task"].get<std::string>();
        if (!obj.contains("symmetric")) throw DataError(where + ": missing field symmetric");
        if (!obj["symmetric"].is_boolean()) throw DataError(where + ": field symmetric must be a boolean");
        t.symmetric = obj["symmetric"].get<bool>();
        try {
            t.validate(vocab.size());
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<ContrastiveTuple> load_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset " + path.string());
    return parse_jsonl(in, vocab);
}

inline void write_jsonl(std::ostream& out, const std::vector<ContrastiveTuple>& tuples, const Vocabulary& vocab) {
    for (const auto& t : tuples) {
        nlohmann::ordered_json obj;
        obj["instruction"] = vocab.detokenize(t.instruction);
        obj["query"] = vocab.detokenize(t.query);
        obj["positive"] = vocab.detokenize(t.positive);
        obj["negative"] = vocab.detokenize(t.hard_negative);
        obj["task"] = t.task_id;
        obj["symmetric"] = t.symmetric;
        out << obj.dump() << '\n';
    }
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<ContrastiveTuple>& tuples,
                        const Vocabulary& vocab) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write dataset " + path.string());
    write_jsonl(out, tuples, vocab);
}

// ---------------------------------------------------------------------------
// Synthetic topic corpus.
//
// Content tokens are split into n_topics overlapping windows laid out on a
// ring: topic t covers [t*stride, t*stride + stride + stride/2) modulo the
// content size, so each topic shares a third of its window with topic t+1.
// Queries and positives come from the same window; hard negatives come from
// the next one.

struct SynthSpec {
    std::size_t vocab_size = 266;
    std::size_t n_topics = 32;
    std::size_t tuple_count = 2048;
    double noise_rate = 0.1;
    std::uint64_t seed = 1;
    std::size_t query_len = 8;
    std::size_t doc_len = 8;
    double symmetric_fraction = 0.25;

    void validate() const {
        if (n_topics < 2) throw UsageError("synthetic spec: n_topics must be at least 2");
        if (!(noise_rate >= 0.0 && noise_rate < 0.5)) throw UsageError("synthetic spec: noise_rate must be in [0, 0.5)");
        if (query_len == 0 || doc_len == 0) throw UsageError("synthetic spec: sequence lengths must be positive");
        if (!(symmetric_fraction >= 0.0 && symmetric_fraction <= 1.0)) {
            throw UsageError("synthetic spec: symmetric_fraction must be in [0, 1]");
        }
    }
};

struct SynthLayout {
    static constexpr std::size_t kInstructionBase = 2;
    static constexpr std::size_t kInstructionWords = 8;
    static constexpr std::size_t kContentBase = kInstructionBase + kInstructionWords;

    std::size_t vocab_size;
    std::size_t n_topics;
    std::size_t content;
    std::size_t stride;
    std::size_t width;

    explicit SynthLayout(const SynthSpec& spec) : vocab_size(spec.vocab_size), n_topics(spec.n_topics) {
        spec.validate();
        if (vocab_size < kContentBase + 2 * n_topics) {
            throw UsageError("synthetic spec: vocab_size " + std::to_string(vocab_size) + " too small for " +
                             std::to_string(n_topics) + " topics");
        }
        content = vocab_size - kContentBase;
        stride = content / n_topics;
        width = stride + stride / 2;
    }

    std::size_t topic_token(std::size_t topic, std::size_t j) const {
        return kContentBase + (topic * stride + j) % content;
    }
    std::size_t instruction_token(std::size_t k) const { return kInstructionBase + k % kInstructionWords; }

    Vocabulary vocabulary() const {
        std::vector<std::string> tokens{"<pad>", "<unk>"};
        for (std::size_t k = 0; k < kInstructionWords; ++k) tokens.push_back("i" + std::to_string(k));
        for (std::size_t k = 0; k < content; ++k) tokens.push_back("w" + std::to_string(k));
        return Vocabulary(std::move(tokens));
    }

    TokenSeq sample_topic(Rng& rng, std::size_t topic, std::size_t len, double noise) const {
        TokenSeq out(len);
        for (auto& id : out) {
            id = topic_token(topic, rng.below(width));
            if (noise > 0.0 && rng.uniform() < noise) id = kContentBase + rng.below(content);
        }
        return out;
    }

    // `mix` of the tokens from `topic`, the rest from `other`.
    TokenSeq sample_mixture(Rng& rng, std::size_t topic, std::size_t other, std::size_t len, double mix) const {
        TokenSeq out(len);
        const std::size_t from_topic = static_cast<std::size_t>(mix * static_cast<double>(len) + 0.5);
        for (std::size_t i = 0; i < len; ++i) {
            out[i] = topic_token(i < from_topic ? topic : other, rng.below(width));
        }
        rng.shuffle(std::span<std::size_t>(out));
        return out;
    }
};

inline const TokenSeq& retrieval_instruction() {
    static const TokenSeq ids{2, 3, 4};
    return ids;
}
inline const TokenSeq& similarity_instruction() {
    static const TokenSeq ids{5, 6};
    return ids;
}

inline std::vector<ContrastiveTuple> synth_generate(const SynthSpec& spec) {
    const SynthLayout layout(spec);
    Rng rng(spec.seed);
    std::vector<ContrastiveTuple> out;
    out.reserve(spec.tuple_count);
    for (std::size_t i = 0; i < spec.tuple_count; ++i) {
        ContrastiveTuple t;
        const std::size_t topic = rng.below(spec.n_topics);
        t.symmetric = rng.uniform() < spec.symmetric_fraction;
        t.task_id = t.symmetric ? "similarity" : "retrieval";
        t.instruction = t.symmetric ? similarity_instruction() : retrieval_instruction();
        t.query = layout.sample_topic(rng, topic, spec.query_len, spec.noise_rate);
        t.positive = layout.sample_topic(rng, topic, spec.doc_len, 0.0);
        t.hard_negative = layout.sample_topic(rng, (topic + 1) % spec.n_topics, spec.doc_len, 0.0);
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Epoch sampler: draws tuple indices without replacement until the epoch is
// exhausted, then reshuffles. A task weight below 1 keeps each tuple of that
// task in an epoch with that probability.

class TupleSampler {
public:
    TupleSampler(const std::vector<ContrastiveTuple>& tuples, std::uint64_t seed,
                 std::map<std::string, double> task_weights = {})
        : tuples_(&tuples), rng_(seed), weights_(std::move(task_weights)) {
        if (tuples.empty()) throw DataError("cannot sample from an empty dataset");
        const bool any = std::any_of(tuples.begin(), tuples.end(), [&](const ContrastiveTuple& t) {
            auto it = weights_.find(t.task_id);
            return it == weights_.end() || it->second > 0.0;
        });
        if (!any) throw DataError("every task has sampling weight 0");
    }

    std::vector<std::size_t> next(std::size_t count) {
        std::vector<std::size_t> out;
        out.reserve(count);
        while (out.size() < count) {
            if (cursor_ == order_.size()) refill();
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    void refill() {
        order_.clear();
        cursor_ = 0;
        while (order_.empty()) {
            for (std::size_t i = 0; i < tuples_->size(); ++i) {
                auto it = weights_.find((*tuples_)[i].task_id);
                const double w = it == weights_.end() ? 1.0 : it->second;
                if (w >= 1.0 || rng_.uniform() < w) order_.push_back(i);
            }
        }
        rng_.shuffle(std::span<std::size_t>(order_));
    }

    const std::vector<ContrastiveTuple>* tuples_;
    Rng rng_;
    std::map<std::string, double> weights_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace l3p
