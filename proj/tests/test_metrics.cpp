#include <gtest/gtest.h>

#include <sstream>

#include "mixmfl/metrics.hpp"

using namespace mixmfl;

TEST(DiceScore, HandComputedOverlap) {
    std::vector<std::uint8_t> pred{1, 1, 0, 2, 2, 0}, truth{1, 0, 0, 2, 0, 2};
    // Class 1: |A∩B| = 1, |A| = 2, |B| = 1.
    EXPECT_DOUBLE_EQ(dice_score(pred, truth, 1), 2.0 / 3.0);
    // Class 2: |A∩B| = 1, |A| = 2, |B| = 2.
    EXPECT_DOUBLE_EQ(dice_score(pred, truth, 2), 0.5);
    EXPECT_DOUBLE_EQ(mdice(pred, truth), (2.0 / 3.0 + 0.5) / 2.0);
}

TEST(DiceScore, AbsentClassScoresOneAndMissedClassZero) {
    std::vector<std::uint8_t> zeros(4, 0), ones(4, 1);
    EXPECT_EQ(dice_score(zeros, zeros, 1), 1.0);
    EXPECT_EQ(dice_score(zeros, ones, 1), 0.0);
    EXPECT_EQ(dice_score(ones, ones, 1), 1.0);
}

TEST(AverageMdice, UnweightedMeanOverClients) {
    std::vector<ClientRoundResult> c(3);
    c[0].mdice = 0.2;
    c[1].mdice = 0.4;
    c[2].mdice = 0.9;
    EXPECT_DOUBLE_EQ(average_mdice(c), 0.5);
    EXPECT_EQ(average_mdice({}), 0.0);
}

TEST(ResultsCsv, OneRowPerClientAndForegroundClass) {
    RoundReport r;
    r.round = 3;
    ClientRoundResult c;
    c.client = 1;
    c.class_dice = {0.25, 0.75};
    c.mdice = 0.5;
    c.losses.seg = 0.1;
    c.losses.total = 0.125;
    r.clients.push_back(c);
    std::ostringstream os;
    write_results_header(os);
    write_results_rows(os, r);
    EXPECT_EQ(os.str(),
              "round,client,class,dice,mdice,loss_seg,loss_cls,loss_tri,loss_total\n"
              "3,1,core,0.25,0.5,0.10000000000000001,0,0,0.125\n"
              "3,1,edema,0.75,0.5,0.10000000000000001,0,0,0.125\n");
}
