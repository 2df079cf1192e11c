#pragma once

#include "sem2/core/image.hpp"
#include "sem2/core/rng.hpp"
#include "sem2/envsim/env.hpp"

#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <vector>

namespace sem2 {

// One environment step as stored: the observation/mask that arrived, the
// action that produced them (zero for the reset record), and the reward
// received on that transition.
struct TransitionRecord {
    Image observation;
    Image mask;
    Action action;
    double reward = 0.0;
    Termination termination = Termination::none;
    uint64_t episode_id = 0;
    uint32_t step_index = 0;

    bool operator==(const TransitionRecord& o) const;
};

enum class BucketKind { common = 0, out_lane = 1, collision = 2 };
const char* to_string(BucketKind k);

struct Episode {
    uint64_t id = 0;
    std::string layout;
    uint64_t seed = 0;
    std::vector<TransitionRecord> records;

    Termination final_termination() const {
        return records.empty() ? Termination::none : records.back().termination;
    }
};

struct SequenceSample {
    BucketKind source = BucketKind::common;
    uint64_t episode_id = 0;
    std::vector<TransitionRecord> records;  // L contiguous steps
};

struct SequenceBatch {
    std::vector<SequenceSample> sequences;  // size B
};

struct BucketStats {
    size_t episodes = 0;
    size_t transitions = 0;
};

struct BufferStats {
    BucketStats common, out_lane, collision;
};

struct ReplayConfig {
    size_t common_capacity = 100000;   // transitions
    size_t corner_capacity = 20000;    // transitions, per corner bucket
    int batch_size = 16;               // B
    int sequence_length = 16;          // L
    bool multisource = true;           // corner buckets disabled when false
    std::string dump_dir;              // optional on-disk episode spill
};

// Common / out-lane / collision episode stores with a persistent
// round-robin cursor. One writer and one reader may interleave.
class MultiSourceBuffer {
public:
    explicit MultiSourceBuffer(ReplayConfig cfg);

    // Appends the full episode to the common bucket; corner endings also
    // get their last 2*L steps copied into the matching corner bucket.
    void add_episode(const Episode& episode);

    SequenceBatch sample_batch(int B, int L, Rng& rng) const;
    SequenceBatch sample_batch(Rng& rng) const {
        return sample_batch(cfg_.batch_size, cfg_.sequence_length, rng);
    }

    BufferStats stats() const;
    bool can_sample(int L) const;
    const ReplayConfig& config() const { return cfg_; }

private:
    struct Bucket {
        std::deque<Episode> episodes;
        size_t transitions = 0;
        size_t capacity = 0;
    };

    void push_to(Bucket& bucket, Episode episode);
    static void validate(const Episode& episode);

    ReplayConfig cfg_;
    Bucket buckets_[3];
    mutable size_t rr_cursor_ = 0;
    mutable std::mutex mu_;
};

// Episode dump: versioned binary container, bit-exact round trip.
void save_episode(const std::string& path, const Episode& episode);
Episode load_episode(const std::string& path);

} // namespace sem2
